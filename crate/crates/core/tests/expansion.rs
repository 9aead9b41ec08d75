use std::sync::Arc;

use pmelab::asymptotics::*;
use pmelab::forward::*;
use pmelab::grid::*;
use pmelab::transform::*;
use pmelab::Problem;

#[test]
fn remainder_orders_and_correction_trace() {
    let g = Arc::new(Grid::<f64>::interval(64, 1.0).unwrap());
    let p = Problem::new(2.0, 1.2).unwrap();
    let alpha = 2.0;
    let t = auto_t(&p, alpha).unwrap();
    assert_eq!(t, 2f64.powi(-7));
    let coeffs = CoefficientSet::constant(&g, 1e-6, 1.0, 1e-5).unwrap();
    let gb = BoundaryTrace::from_fn(&g, |x| 1.0 + 0.5 * x[0]);
    let hs: Vec<f64> = (0..8).map(|i| 2f64.powi(4 + 2 * i)).collect();
    let lin = SolverOptions { rel_tol: 1e-14, max_iter: None };
    let steps = 1000;
    let cfg = SweepConfig { steps, k_schedule: vec![1e7, 1e8], forward: ForwardOptions { newton_tol: 1e-13, linear: lin, ..Default::default() } };
    let runs = run_sweep(&p, &coeffs, &gb, t, alpha, &hs, &cfg).unwrap();

    let w = TimeWeights::discrete(&TimeGrid::new(t, steps).unwrap(), alpha, 2.0, 1.2);
    let v0 = solve_v0(&coeffs.gamma, &gb, &lin).unwrap();
    let vt = solve_vt(&coeffs.gamma, &coeffs.eps, &v0, w.w_t, 2.0, &lin).unwrap();
    let va = solve_va(&coeffs.gamma, &coeffs.lambda, &v0, w.w_a, &p, &lin).unwrap();
    let study = remainder_study(&runs, &v0, &vt, &va, w.c, &p).unwrap();
    assert!(study.r1_exponent <= 0.65, "R1 exponent {}", study.r1_exponent);
    assert!(study.r2_exponent <= 0.41, "R2 exponent {}", study.r2_exponent);
    // R1 is nonpositive up to a small discretization residue
    assert!(study.r1_positive_part <= 0.1 * study.r1.iter().cloned().fold(0.0, f64::max));
    assert!(runs.iter().all(|r| r.supersolution_excess <= 1e-8));

    let leading = boundary_flux(&v0, &coeffs.gamma).unwrap().scaled(w.c);
    let sweep: Vec<_> = runs.iter().map(|r| (r.h, r.trace.clone())).collect();
    let fit = fit_expansion(&sweep, &leading, &p).unwrap();
    let ft = boundary_flux(&vt, &coeffs.gamma).unwrap();
    let rel = fit.a.zip_with(&ft, |a, b| a - b).unwrap().l2_norm_on(Subset::Sigma) / ft.l2_norm_on(Subset::Sigma);
    assert!(rel <= 0.05, "V_t trace mismatch {rel:e}");
    assert!(fit.condition < MAX_FIT_CONDITION);
}
