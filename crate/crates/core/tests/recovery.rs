use std::sync::Arc;

use pmelab::grid::{Grid, SolverOptions};
use pmelab::recovery::*;
use pmelab::special::weighted_power_integral;
use pmelab::Field;

fn phantom(g: &Arc<Grid<f64>>, centre: [f64; 2]) -> Field {
    Field::from_fn(g, |x| 1.0 + 0.3 * (-((x[0] - centre[0]).powi(2) + (x[1] - centre[1]).powi(2)) / 0.02).exp())
}

fn rel_err(a: &Field, b: &Field) -> f64 {
    a.sub(b).unwrap().l2_norm() / b.l2_norm()
}

struct Setup {
    g: Arc<Grid<f64>>,
    basis: HarmonicBasis<f64>,
    coarse: CoarseBasis<f64>,
}

fn setup() -> Setup {
    let g = Arc::new(Grid::unit_square(48).unwrap());
    let one = Field::constant(&g, 1.0);
    let basis = build_basis(&one, 13, false, &SolverOptions { rel_tol: 1e-13, max_iter: None }).unwrap();
    let coarse = CoarseBasis::new(&g, 8).unwrap();
    Setup { g, basis, coarse }
}

#[test]
fn eps_and_lambda_phantoms() {
    let s = setup();
    for centre in [[0.6, 0.4], [0.35, 0.65]] {
        let truth = phantom(&s.g, centre);
        let m = linearized_rows(&truth, &s.basis, &s.basis).unwrap();
        let rec = recover_field(&m, &s.basis, &s.basis, &s.coarse, &default_mu_grid()).unwrap();
        let err = rel_err(&rec.field, &truth);
        let bump_err = rec.field.sub(&truth).unwrap().l2_norm() / truth.map(|v| v - 1.0).l2_norm();
        println!("centre {centre:?}: rel {err:.4} bump-relative {bump_err:.3} mu {:e}", rec.mu);
        assert!(err <= 0.15, "relative L2 error {err}");
        assert!(rec.singular_values.last().copied().unwrap_or(0.0) > 0.0);
    }
}

#[test]
fn two_time_disambiguation() {
    let s = setup();
    let eps = phantom(&s.g, [0.6, 0.4]);
    let lambda = phantom(&s.g, [0.35, 0.65]).map(|v| 2.0 * v);
    let e = linearized_rows(&eps, &s.basis, &s.basis).unwrap();
    let l = linearized_rows(&lambda, &s.basis, &s.basis).unwrap();
    // q = 1, alpha = 2: w_t = T^3/3, w_a = int (T-t)^2 t dt
    let w = |t: f64| (t.powi(3) / 3.0, weighted_power_integral(t, 2.0, 1.0));
    let ((a0, b0), (a1, b1)) = (w(0.5), w(0.25));
    let tw = TwoTimeWeights { w_t: [a0, a1], w_a: [b0, b1] };
    assert!(tw.determinant() != 0.0);
    let combine = |wt: f64, wa: f64| {
        let mut p = e.clone();
        for i in 0..13 {
            for j in 0..13 {
                p[(i, j)] = wt * e[(i, j)] + wa * l[(i, j)];
            }
        }
        p
    };
    let (p0, p1) = (combine(a0, b0), combine(a1, b1));
    let rec = disambiguate_q1([&p0, &p1], tw, &s.basis, &s.basis, &s.coarse, &default_mu_grid()).unwrap();
    let (ee, el) = (rel_err(&rec.eps.field, &eps), rel_err(&rec.lambda.field, &lambda));
    println!("eps {ee:.4} lambda {el:.4}");
    assert!(ee <= 0.15 && el <= 0.15);

    let degenerate = TwoTimeWeights { w_t: [a0, a0], w_a: [b0, b0] };
    assert!(matches!(
        disambiguate_q1([&p0, &p0], degenerate, &s.basis, &s.basis, &s.coarse, &default_mu_grid()),
        Err(pmelab::Error::IllConditioned(_))
    ));
}
