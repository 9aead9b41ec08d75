use std::sync::Arc;

use pmelab::forward::*;
use pmelab::grid::Grid;
use pmelab::{Field, Problem, Times, Trajectory};

fn oracle_a(nodes: usize, steps: usize, k: f64) -> f64 {
    let g = Arc::new(Grid::interval(nodes, 1.0).unwrap());
    let time = Times::new(1.0, steps).unwrap();
    let p = Problem::new(2.0, 1.2).unwrap();
    let coeffs = CoefficientSet::constant(&g, 1.0, 1.0, 1.0).unwrap();
    let phi = BoundarySeries::from_fn(&g, time, |t, _| t);
    let f = Trajectory::from_fn(&g, time, |t, _| 1.0 + t.powf(1.2));
    let sol = solve_forward(&p, &coeffs, &phi, &f, k, &ForwardOptions::default()).unwrap();
    let energy = energy_report(&sol.u, &phi, &f, &p).unwrap();
    assert!(energy.ratio <= ENERGY_CONSTANT, "energy ratio {}", energy.ratio);
    let exact = Trajectory::from_fn(&g, time, |t, _| t);
    sol.u.zip_with(&exact, |a, b| a - b).unwrap().max_abs()
}

/// `u = (t - x)_+ / 2` solves `u_t = (u^2)_xx`.
fn wave(nodes: usize, steps: usize, k: f64) -> (f64, f64) {
    let g = Arc::new(Grid::interval(nodes, 1.0).unwrap());
    let time = Times::new(1.0, steps).unwrap();
    let p = Problem::new(2.0, 1.2).unwrap();
    let coeffs = CoefficientSet::constant(&g, 1.0, 1.0, 0.0).unwrap();
    let exact = |t: f64, x: [f64; 2]| (t - x[0]).max(0.0) / 2.0;
    let phi = BoundarySeries::from_fn(&g, time, exact);
    let f = Trajectory::zeros(&g, time);
    let sol = solve_forward(&p, &coeffs, &phi, &f, k, &ForwardOptions::default()).unwrap();
    let err = sol.u.zip_with(&Trajectory::from_fn(&g, time, exact), |a, b| (a - b).abs()).unwrap();
    let energy = energy_report(&sol.u, &phi, &f, &p).unwrap();
    assert!(energy.ratio <= ENERGY_CONSTANT, "energy ratio {}", energy.ratio);
    let linf = err.max_abs();
    let l1 = err.levels().iter().map(Field::l1_norm).fold(0.0, f64::max);
    (linf, l1)
}

#[test]
fn spatially_constant_solution() {
    let e = oracle_a(128, 256, 1e4);
    assert!(e <= 1e-3, "L-inf error {e:e}");
    // the error is the regularization shift, O(1/k)
    let e6 = oracle_a(128, 256, 1e6);
    assert!(e6 < e / 50.0, "{e6:e} vs {e:e}");
}

#[test]
fn traveling_wave_accuracy() {
    let (linf, _) = wave(257, 512, 1e4);
    assert!(linf <= 2e-2, "L-inf error {linf:e}");
}

#[test]
fn traveling_wave_converges_at_first_order() {
    let errs: Vec<(f64, f64)> = [(129, 256), (257, 512), (513, 1024)].iter().map(|&(n, s)| wave(n, s, 1e8)).collect();
    for w in errs.windows(2) {
        let l1_order = (w[0].1 / w[1].1).log2();
        let linf_order = (w[0].0 / w[1].0).log2();
        assert!(l1_order >= 0.9, "L1 order {l1_order:.3}");
        assert!(linf_order >= 0.7, "L-inf order {linf_order:.3}");
    }
}

#[test]
fn single_precision_run() {
    let g = Arc::new(Grid::<f32>::interval(33, 1.0).unwrap());
    let time = TimeGrid::<f32>::new(1.0, 32).unwrap();
    let p = ProblemParams::<f32>::new(2.0, 1.2).unwrap();
    let coeffs = CoefficientSet::constant(&g, 1.0, 1.0, 1.0).unwrap();
    let phi = BoundarySeries::from_fn(&g, time, |t, _| t);
    let f = SpaceTimeField::from_fn(&g, time, |t: f32, _| 1.0 + t.powf(1.2));
    let opts = ForwardOptions { newton_tol: 1e-5, bound_tol: 1e-5, ..Default::default() };
    let sol = solve_forward(&p, &coeffs, &phi, &f, 1e3, &opts).unwrap();
    let exact = SpaceTimeField::from_fn(&g, time, |t: f32, _| t);
    let e = sol.u.zip_with(&exact, |a, b| a - b).unwrap().max_abs();
    assert!(e <= 5e-3, "f32 error {e:e}");
}
