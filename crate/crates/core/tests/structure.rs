use std::sync::Arc;

use proptest::prelude::*;

use pmelab::forward::*;
use pmelab::grid::Grid;
use pmelab::{BoundaryData, Coefficients, Problem, Times, Trajectory};

/// Boundary data `a t (1 + b x)` and source `c (1 + t) + d x` on `(0, 1)`.
struct Data {
    phi: BoundaryData,
    f: Trajectory,
}

fn data(g: &Arc<Grid<f64>>, time: Times, [a, b, c, d]: [f64; 4]) -> Data {
    Data {
        phi: BoundarySeries::from_fn(g, time, move |t, x| a * t * (1.0 + b * x[0])),
        f: Trajectory::from_fn(g, time, move |t, x| c * (1.0 + t) + d * x[0]),
    }
}

fn setup(nodes: usize, steps: usize) -> (Arc<Grid<f64>>, Times, Problem, Coefficients) {
    let g = Arc::new(Grid::interval(nodes, 1.0).unwrap());
    let time = Times::new(0.5, steps).unwrap();
    let p = Problem::new(2.0, 1.2).unwrap();
    let eps = pmelab::Field::from_fn(&g, |x| 1.0 + 0.5 * x[0]);
    let gamma = pmelab::Field::from_fn(&g, |x| 1.0 + 0.3 * (3.0 * x[0]).sin());
    let lambda = pmelab::Field::constant(&g, 0.7);
    (g.clone(), time, p, CoefficientSet::new(eps, gamma, lambda).unwrap())
}

const K: f64 = 1e4;

fn solve(p: &Problem, c: &Coefficients, d: &Data) -> ForwardSolution<f64> {
    solve_forward(p, c, &d.phi, &d.f, K, &ForwardOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn comparison_principle(a in 0.0..2.0f64, b in 0.0..1.0f64, c in 0.0..2.0f64, d in 0.0..1.0f64,
                            da in 0.0..1.0f64, dc in 0.0..1.0f64) {
        let (g, time, p, coeffs) = setup(33, 40);
        let lo = solve(&p, &coeffs, &data(&g, time, [a, b, c, d]));
        let hi = solve(&p, &coeffs, &data(&g, time, [a + da, b, c + dc, d]));
        let excess = lo.u.zip_with(&hi.u, |l, h| l - h).unwrap().max();
        prop_assert!(excess <= 1e-8, "u1 - u2 reaches {excess:e}");
    }

    #[test]
    fn maximum_principle(a in 0.0..2.0f64, b in 0.0..1.0f64, c in 0.0..2.0f64, d in 0.0..1.0f64) {
        let (g, time, p, coeffs) = setup(33, 40);
        let sol = solve(&p, &coeffs, &data(&g, time, [a, b, c, d]));
        prop_assert!(sol.u.min() >= sol.schedule.floor - 1e-10);
        prop_assert!(sol.u.max() <= sol.schedule.ceiling + 1e-10);
    }
}

#[test]
fn k_monotone_limit() {
    let (g, time, p, coeffs) = setup(33, 40);
    let d = data(&g, time, [1.0, 0.5, 1.0, 0.2]);
    let weak = solve_weak(&p, &coeffs, &d.phi, &d.f, &[1e2, 1e3, 1e4, 1e5], &ForwardOptions::default()).unwrap();
    assert_eq!(weak.monotonicity_excess, 0.0);
    assert!(weak.k_error < 1e-4, "{:e}", weak.k_error);
}

#[test]
fn energy_estimate_regression() {
    let (g, time, p, coeffs) = setup(33, 40);
    let mut worst = 0.0f64;
    for pars in [[1.0, 0.5, 1.0, 0.2], [2.0, 0.0, 0.0, 0.0], [0.1, 1.0, 2.0, 1.0], [0.0, 0.0, 1.0, 0.0], [1.5, 1.0, 0.5, 0.5]] {
        let d = data(&g, time, pars);
        let sol = solve(&p, &coeffs, &d);
        let r = energy_report(&sol.u, &d.phi, &d.f, &p).unwrap();
        println!("{pars:?}: {r:?}");
        worst = worst.max(r.ratio);
    }
    assert!(worst <= ENERGY_CONSTANT, "ratio {worst}");
}

/// A smooth test function vanishing on the lateral boundary and at `T`.
fn test_function(g: &Arc<Grid<f64>>, time: Times) -> Trajectory {
    let t_final = time.t_final();
    Trajectory::from_fn(g, time, move |t, x| (std::f64::consts::PI * x[0]).sin() * (t_final - t))
}

#[test]
fn weak_residual_decays_under_refinement() {
    let mut res = Vec::new();
    for (n, s) in [(17, 20), (33, 40), (65, 80)] {
        let (g, time, p, coeffs) = setup(n, s);
        let d = data(&g, time, [1.0, 0.5, 1.0, 0.2]);
        let weak = solve_weak(&p, &coeffs, &d.phi, &d.f, &[1e4, 1e6], &ForwardOptions::default()).unwrap();
        res.push(weak_residual(&weak.u, &test_function(&g, time), &p, &coeffs, &d.f).unwrap());
    }
    println!("{res:?}");
    assert!(res[1] < res[0] && res[2] < res[1], "{res:?}");
}

#[test]
fn residual_rejects_bad_test_functions() {
    let (g, time, p, coeffs) = setup(17, 10);
    let d = data(&g, time, [1.0, 0.5, 1.0, 0.2]);
    let sol = solve(&p, &coeffs, &d);
    let bad = Trajectory::from_fn(&g, time, |_, _| 1.0);
    assert!(matches!(weak_residual(&sol.u, &bad, &p, &coeffs, &d.f), Err(pmelab::Error::Support(_))));
}
