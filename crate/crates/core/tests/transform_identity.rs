use std::sync::Arc;

use proptest::prelude::*;

use pmelab::forward::*;
use pmelab::grid::Grid;
use pmelab::transform::*;
use pmelab::{Field, Problem, Times, Trajectory};

/// Solves an oracle problem and returns the identity residual relative to
/// `dt + spacing^2`, and whether both Hoelder inequalities hold.
fn oracle_identity(wave: bool, nodes: usize, steps: usize) -> (f64, bool) {
    let g = Arc::new(Grid::interval(nodes, 1.0).unwrap());
    let time = Times::new(1.0, steps).unwrap();
    let p = Problem::new(2.0, 1.2).unwrap();
    let (coeffs, phi, f) = if wave {
        let ex = |t: f64, x: [f64; 2]| (t - x[0]).max(0.0) / 2.0;
        (CoefficientSet::constant(&g, 1.0, 1.0, 0.0).unwrap(), BoundarySeries::from_fn(&g, time, ex), Trajectory::zeros(&g, time))
    } else {
        (
            CoefficientSet::constant(&g, 1.0, 1.0, 1.0).unwrap(),
            BoundarySeries::from_fn(&g, time, |t, _| t),
            Trajectory::from_fn(&g, time, |t, _| 1.0 + t.powf(1.2)),
        )
    };
    let k = 1e8;
    let sol = solve_forward(&p, &coeffs, &phi, &f, k, &ForwardOptions { newton_tol: 1e-12, ..Default::default() }).unwrap();
    let tp = TransformParams::new(&p, 1.0, 2.0, 2.0).unwrap();
    let bundle = TransformBundle::new(&v_of_u(&sol.u, 2.0).unwrap(), &coeffs, &tp, &p).unwrap();
    // the regularized problem carries f + 1/k and u(0) = 1/k
    let fk = f.map(|v| v + 1.0 / k);
    let u0 = Field::constant(&g, 1.0 / k);
    let id = identity_residual(&bundle, &coeffs, Some(&fk), Some(&u0)).unwrap();
    let h = 1.0 / (nodes - 1) as f64;
    let ineq = verify_inequality(&bundle, &coeffs, &p).unwrap();
    (id.max_residual / (id.scale * (time.dt() + h * h)), ineq.holds)
}

#[test]
fn identity_on_constant_oracle() {
    let (c1, ok) = oracle_identity(false, 65, 128);
    let (c2, _) = oracle_identity(false, 129, 256);
    println!("{c1:e} {c2:e}");
    assert!(ok);
    assert!(c1 <= IDENTITY_CONSTANT && c2 <= IDENTITY_CONSTANT, "{c1} {c2}");
}

#[test]
fn identity_on_traveling_wave() {
    let (c1, ok) = oracle_identity(true, 65, 128);
    let (c2, _) = oracle_identity(true, 129, 256);
    println!("{c1:e} {c2:e}");
    assert!(ok);
    assert!(c1 <= IDENTITY_CONSTANT && c2 <= IDENTITY_CONSTANT, "{c1} {c2}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 50, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn closed_form_constant_matches_quadrature(t in 0.01..3.0f64, alpha in 0.5..6.0f64, m in 1.05..5.0f64) {
        let exact = time_weight_constant(t, alpha, m).unwrap();
        let quad = time_weight_quadrature(t, alpha, m);
        prop_assert!((exact - quad).abs() <= 1e-10 * exact.abs().max(1e-300),
            "{exact:e} vs {quad:e}");
    }
}
