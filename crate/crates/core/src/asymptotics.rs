//! Large-amplitude expansion of the transformed problem.
//!
//! With boundary data `v = h t^m g` the transform behaves like
//! `V = h c V0 + h^(1/m) V_t + h^(q/m) V_a + R2`, where `V0` is the
//! gamma-harmonic extension of `g` and `V_t`, `V_a` solve Poisson problems
//! driven by `eps V0^(1/m)` and `lambda V0^(q/m)`. Dividing the conormal
//! derivative by `h` gives the expansion of the Dirichlet-to-Neumann data
//! `Lambda^h`.

use rayon::prelude::*;
use serde::Serialize;

use crate::dense::{least_squares, loglog_slope, Matrix};
use crate::error::{Error, Result};
use crate::forward::{solve_weak, BoundarySeries, CoefficientSet, ForwardOptions, ProblemParams, SpaceTimeField, TimeGrid};
use crate::grid::{boundary_flux, EllipticOperator, check_same, solve_elliptic_with, BoundaryTrace, ScalarField, SolverOptions, Subset};
use crate::real::Real;
use crate::special;
use crate::transform::{kernel_weights, transform_v, v_of_u, TransformParams};

/// The three time weights of the expansion:
/// `c = int (T-t)^alpha t^m`, `w_t = alpha int (T-t)^(alpha-1) t` and
/// `w_a = int (T-t)^alpha t^q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeWeights {
    pub c: f64,
    pub w_t: f64,
    pub w_a: f64,
}

impl TimeWeights {
    /// Closed forms through the Beta function.
    pub fn exact(t_final: f64, alpha: f64, m: f64, q: f64) -> Self {
        Self {
            c: special::weighted_power_integral(t_final, alpha, m),
            w_t: t_final.powf(alpha + 1.0) / (alpha + 1.0),
            w_a: special::weighted_power_integral(t_final, alpha, q),
        }
    }

    /// The weights the backward Euler trajectory actually realizes on a
    /// time grid: the trapezoid transform of `t^m`, and the `eps`, `lambda`
    /// terms summed over the implicit levels `n >= 1` (the time difference
    /// of `t` is exactly 1 there).
    pub fn discrete<S: Real>(time: &TimeGrid<S>, alpha: f64, m: f64, q: f64) -> Self {
        let w = kernel_weights(time, S::lit(alpha));
        let times = time.times();
        let mut out = Self { c: 0.0, w_t: 0.0, w_a: 0.0 };
        for (n, (&wn, &t)) in w.iter().zip(&times).enumerate() {
            let (wn, t) = (wn.f64(), t.f64());
            out.c += wn * t.powf(m);
            if n >= 1 {
                out.w_t += wn;
                out.w_a += wn * t.powf(q);
            }
        }
        out
    }
}

/// `div(gamma grad V0) = 0`, `V0 = g` on the boundary.
pub fn solve_v0<S: Real>(gamma: &ScalarField<S>, g: &BoundaryTrace<S>, opts: &SolverOptions) -> Result<ScalarField<S>> {
    if g.min() < S::zero() {
        return Err(Error::InvalidData(format!("boundary data g must be nonnegative (min {})", g.min())));
    }
    solve_elliptic_with(gamma, &ScalarField::zeros(gamma.grid()), g, opts)
}

fn poisson_correction<S: Real>(gamma: &ScalarField<S>, coef: &ScalarField<S>, v0: &ScalarField<S>, weight: f64, power: S, opts: &SolverOptions) -> Result<ScalarField<S>> {
    check_same(gamma.grid(), coef.grid())?;
    check_same(gamma.grid(), v0.grid())?;
    if v0.min() < S::zero() {
        return Err(Error::InvalidData("V0 must be nonnegative".into()));
    }
    let w = S::lit(weight);
    let rhs = coef.zip_with(v0, |c, v| w * c * v.powf(power))?;
    solve_elliptic_with(gamma, &rhs, &BoundaryTrace::zeros(gamma.grid()), opts)
}

/// `div(gamma grad V_t) = w_t eps V0^(1/m)`, `V_t = 0` on the boundary.
pub fn solve_vt<S: Real>(gamma: &ScalarField<S>, eps: &ScalarField<S>, v0: &ScalarField<S>, w_t: f64, m: S, opts: &SolverOptions) -> Result<ScalarField<S>> {
    poisson_correction(gamma, eps, v0, w_t, m.recip(), opts)
}

/// `div(gamma grad V_a) = w_a lambda V0^(q/m)`, `V_a = 0` on the boundary.
pub fn solve_va<S: Real>(
    gamma: &ScalarField<S>,
    lambda: &ScalarField<S>,
    v0: &ScalarField<S>,
    w_a: f64,
    problem: &ProblemParams<S>,
    opts: &SolverOptions,
) -> Result<ScalarField<S>> {
    poisson_correction(gamma, lambda, v0, w_a, problem.q / problem.m, opts)
}

/// Numerical settings of one `Lambda^h` evaluation.
#[derive(Debug, Clone)]
pub struct SweepConfig<S> {
    pub steps: usize,
    pub k_schedule: Vec<S>,
    pub forward: ForwardOptions,
}

/// One `h` of a sweep.
#[derive(Debug, Clone)]
pub struct LambdaRun<S> {
    pub h: S,
    /// `h^-1 gamma d_nu V`.
    pub trace: BoundaryTrace<S>,
    pub v_transform: ScalarField<S>,
    pub k_error: S,
    /// Largest entry of `v - v0`, where `v0` is the level-wise harmonic
    /// extension of the boundary values of `v` (should be <= 0).
    pub supersolution_excess: S,
}

/// Boundary data `phi = (h t^m g)^(1/m)` on the time grid.
pub fn amplitude_data<S: Real>(g: &BoundaryTrace<S>, h: S, m: S, time: TimeGrid<S>) -> Result<BoundarySeries<S>> {
    let levels = time.times().into_iter().map(|t| g.map(|x| (h * t.powf(m) * x.max(S::zero())).powf(m.recip()))).collect();
    BoundarySeries::new(time, levels)
}

/// Runs the forward problem with data `v = h t^m g`, transforms and returns
/// `Lambda^h(g) = h^-1 gamma d_nu V`.
pub fn lambda_h<S: Real>(
    problem: &ProblemParams<S>,
    coeffs: &CoefficientSet<S>,
    g: &BoundaryTrace<S>,
    tp: &TransformParams<S>,
    cfg: &SweepConfig<S>,
) -> Result<LambdaRun<S>> {
    check_same(coeffs.grid(), g.grid())?;
    let time = TimeGrid::new(tp.t_final, cfg.steps)?;
    let phi = amplitude_data(g, tp.h, problem.m, time)?;
    let f = SpaceTimeField::zeros(coeffs.grid(), time);
    let weak = solve_weak(problem, coeffs, &phi, &f, &cfg.k_schedule, &cfg.forward)?;
    let v = v_of_u(&weak.u, problem.m)?;
    let vt = transform_v(&v, tp)?;
    let trace = boundary_flux(&vt, &coeffs.gamma)?.scaled(tp.h.recip());
    // the elliptic envelope of the regularized problem: the harmonic
    // extension of the boundary values of v at every level
    let op = EllipticOperator::new(&coeffs.gamma)?;
    let rhs = ScalarField::zeros(coeffs.grid());
    let envelope = v.levels().iter().map(|l| op.solve(&rhs, &l.trace(), &cfg.forward.linear)).collect::<Result<Vec<_>>>()?;
    let report = supersolution_check(&SpaceTimeField::new(time, envelope)?, &v)?;
    Ok(LambdaRun { h: tp.h, trace, v_transform: vt, k_error: weak.k_error, supersolution_excess: S::lit(report.max_violation) })
}

/// Runs `lambda_h` for every `h` in parallel; results are in input order.
pub fn run_sweep<S: Real>(
    problem: &ProblemParams<S>,
    coeffs: &CoefficientSet<S>,
    g: &BoundaryTrace<S>,
    t_final: S,
    alpha: S,
    hs: &[S],
    cfg: &SweepConfig<S>,
) -> Result<Vec<LambdaRun<S>>> {
    hs.par_iter()
        .map(|&h| {
            let tp = TransformParams::new(problem, t_final, alpha, h)?;
            lambda_h(problem, coeffs, g, &tp, cfg)
        })
        .collect()
}

/// Result of fitting `Lambda^h - c gamma d_nu V0 = A h^(1/m-1) + B h^(q/m-1)`.
#[derive(Debug, Clone)]
pub struct ExpansionFit<S> {
    /// `c gamma d_nu V0`, subtracted before the fit.
    pub leading: BoundaryTrace<S>,
    /// Coefficient of `h^(1/m-1)`; compare with `gamma d_nu V_t`.
    pub a: BoundaryTrace<S>,
    /// Coefficient of `h^(q/m-1)`; compare with `gamma d_nu V_a`.
    pub b: BoundaryTrace<S>,
    pub exponents: [f64; 2],
    /// Log-log slope of `|Lambda^h - leading|` over the sweep.
    pub dominant_exponent: f64,
    /// Log-log slope of the fit residual (target `sigma^2 - 1`).
    pub residual_exponent: Option<f64>,
    pub residual_target: f64,
    /// RMS fit residual per boundary node.
    pub node_residuals: Vec<f64>,
    /// Condition number of the column-scaled design.
    pub condition: f64,
}

impl<S: Real> ExpansionFit<S> {
    pub fn residual_ok(&self) -> bool {
        self.residual_exponent.map(|e| e <= self.residual_target + 0.1).unwrap_or(true)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitSummary {
    pub exponents: [f64; 2],
    pub dominant_exponent: f64,
    pub residual_exponent: Option<f64>,
    pub residual_target: f64,
    pub condition: f64,
}

impl<S: Real> ExpansionFit<S> {
    pub fn summary(&self) -> FitSummary {
        FitSummary {
            exponents: self.exponents,
            dominant_exponent: self.dominant_exponent,
            residual_exponent: self.residual_exponent,
            residual_target: self.residual_target,
            condition: self.condition,
        }
    }
}

/// Condition number above which the two-exponent fit is refused.
pub const MAX_FIT_CONDITION: f64 = 1e10;

/// Per-node fit of the two correction terms. The known leading trace is
/// subtracted, the data are divided by `h^(1/m-1)`, and
/// `y = A + B h^(q/m - 1/m)` is solved by least squares.
pub fn fit_expansion<S: Real>(sweep: &[(S, BoundaryTrace<S>)], leading: &BoundaryTrace<S>, problem: &ProblemParams<S>) -> Result<ExpansionFit<S>> {
    if sweep.len() < 6 {
        return Err(Error::IllConditioned(format!("{} sweep points, need at least 6", sweep.len())));
    }
    let (m, q) = (problem.m.f64(), problem.q.f64());
    let p1 = 1.0 / m - 1.0;
    let p2 = q / m - 1.0;
    if (p2 - p1).abs() < 1e-9 {
        return Err(Error::IllConditioned("exponents coincide (q = 1); use the two-T separation".into()));
    }
    for (_, t) in sweep {
        check_same(t.grid(), leading.grid())?;
    }
    let hs: Vec<f64> = sweep.iter().map(|(h, _)| h.f64()).collect();
    let design = Matrix::from_rows(&hs.iter().map(|&h| vec![1.0, h.powf(p2 - p1)]).collect::<Vec<_>>());
    let nb = leading.values().len();
    let mut a = vec![S::zero(); nb];
    let mut b = vec![S::zero(); nb];
    let mut node_residuals = vec![0.0; nb];
    let mut condition = 0.0f64;
    let mut resid_by_h = vec![0.0f64; hs.len()];
    let mut corr_by_h = vec![0.0f64; hs.len()];
    for j in 0..nb {
        let y: Vec<f64> = sweep.iter().map(|(h, t)| (t.values()[j] - leading.values()[j]).f64() * h.f64().powf(-p1)).collect();
        for (i, (_, t)) in sweep.iter().enumerate() {
            corr_by_h[i] += (t.values()[j] - leading.values()[j]).f64().powi(2);
        }
        if y.iter().all(|&v| v == 0.0) {
            continue;
        }
        let fit = least_squares(&design, &y)?;
        condition = condition.max(fit.condition);
        a[j] = S::lit(fit.coef[0]);
        b[j] = S::lit(fit.coef[1]);
        let mut ss = 0.0;
        for (i, r) in fit.residuals.iter().enumerate() {
            // back to the untransformed scale
            let e = r * hs[i].powf(p1);
            ss += e * e;
            resid_by_h[i] += e * e;
        }
        node_residuals[j] = (ss / hs.len() as f64).sqrt();
    }
    if condition > MAX_FIT_CONDITION {
        return Err(Error::IllConditioned(format!("design condition {condition:e} over the given h range")));
    }
    let corr: Vec<f64> = corr_by_h.iter().map(|v| v.sqrt()).collect();
    let resid: Vec<f64> = resid_by_h.iter().map(|v| v.sqrt()).collect();
    let sigma = problem.sigma().f64();
    let grid = leading.grid().clone();
    Ok(ExpansionFit {
        leading: leading.clone(),
        a: BoundaryTrace::new(grid.clone(), a, Subset::All)?,
        b: BoundaryTrace::new(grid, b, Subset::All)?,
        exponents: [p1, p2],
        dominant_exponent: loglog_slope(&hs, &corr).unwrap_or(f64::NAN),
        residual_exponent: loglog_slope(&hs, &resid),
        residual_target: sigma * sigma - 1.0,
        node_residuals,
        condition,
    })
}

/// Outcome of `v0 >= v`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SupersolutionReport {
    /// `max(v - v0)`, clipped below at 0.
    pub max_violation: f64,
    pub holds: bool,
}

pub fn supersolution_check<S: Real>(v0: &SpaceTimeField<S>, v: &SpaceTimeField<S>) -> Result<SupersolutionReport> {
    v0.check_compatible(v)?;
    let d = v.zip_with(v0, |a, b| a - b)?;
    let max_violation = d.max().f64().max(0.0);
    Ok(SupersolutionReport { max_violation, holds: max_violation <= 1e-8 })
}

/// Size of the remainders `R1 = V - h c V0` and
/// `R2 = R1 - h^(1/m) V_t - h^(q/m) V_a` along a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct RemainderStudy {
    pub hs: Vec<f64>,
    pub r1: Vec<f64>,
    pub r2: Vec<f64>,
    pub r1_exponent: f64,
    pub r2_exponent: f64,
    /// Largest positive entry of `R1` (the sign chain expects `R1 <= 0`).
    pub r1_positive_part: f64,
}

pub fn remainder_study<S: Real>(
    runs: &[LambdaRun<S>],
    v0: &ScalarField<S>,
    vt: &ScalarField<S>,
    va: &ScalarField<S>,
    c: f64,
    problem: &ProblemParams<S>,
) -> Result<RemainderStudy> {
    let (m, q) = (problem.m.f64(), problem.q.f64());
    let mut out = RemainderStudy { hs: vec![], r1: vec![], r2: vec![], r1_exponent: f64::NAN, r2_exponent: f64::NAN, r1_positive_part: 0.0 };
    for run in runs {
        check_same(run.v_transform.grid(), v0.grid())?;
        let h = run.h.f64();
        let grid = v0.grid();
        let (mut r1, mut r2) = (0.0f64, 0.0f64);
        for n in 0..grid.node_count() {
            if !grid.is_in_domain(n) {
                continue;
            }
            let a = run.v_transform.get(n).f64() - h * c * v0.get(n).f64();
            let b = a - h.powf(1.0 / m) * vt.get(n).f64() - h.powf(q / m) * va.get(n).f64();
            out.r1_positive_part = out.r1_positive_part.max(a);
            r1 = r1.max(a.abs());
            r2 = r2.max(b.abs());
        }
        out.hs.push(h);
        out.r1.push(r1);
        out.r2.push(r2);
    }
    out.r1_exponent = loglog_slope(&out.hs, &out.r1).unwrap_or(f64::NAN);
    out.r2_exponent = loglog_slope(&out.hs, &out.r2).unwrap_or(f64::NAN);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    #[test]
    fn weights_agree_with_beta_values() {
        let w = TimeWeights::exact(1.0, 2.0, 2.0, 1.0);
        assert_relative_eq!(w.w_a, 1.0 / 12.0, max_relative = 1e-13);
        assert_relative_eq!(w.c, 1.0 / 30.0, max_relative = 1e-13);
        let time = TimeGrid::new(1.0, 4000).unwrap();
        let d = TimeWeights::discrete(&time, 2.0, 2.0, 1.0);
        assert_relative_eq!(d.c, w.c, max_relative = 1e-5);
        assert_relative_eq!(d.w_t, w.w_t, max_relative = 1e-3);
        assert_relative_eq!(d.w_a, w.w_a, max_relative = 1e-3);
    }

    #[test]
    fn vt_matches_poisson_closed_form() {
        let g = Arc::new(Grid::<f64>::interval(65, 1.0).unwrap());
        let one = ScalarField::constant(&g, 1.0);
        let v0 = solve_v0(&one, &BoundaryTrace::from_fn(&g, |_| 1.0), &SolverOptions::default()).unwrap();
        assert!((v0.max() - 1.0).abs() < 1e-12 && (v0.min() - 1.0).abs() < 1e-12);
        let vt = solve_vt(&one, &one, &v0, 0.25, 2.0, &SolverOptions { rel_tol: 1e-13, max_iter: None }).unwrap();
        for n in 0..65 {
            let x = g.coord(n)[0];
            assert!((vt.get(n) - 0.25 * (x * x - x) / 2.0).abs() < 1e-12);
        }
        assert!(vt.max() <= 1e-12);
        let zero = ScalarField::zeros(&g);
        assert_eq!(solve_vt(&one, &zero, &v0, 0.25, 2.0, &SolverOptions::default()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn synthetic_fit_recovers_coefficients() {
        let g = Arc::new(Grid::<f64>::interval(5, 1.0).unwrap());
        let p = ProblemParams::new(2.0, 1.2).unwrap();
        let leading = BoundaryTrace::from_fn(&g, |x| 0.1 + x[0]);
        let (a, b) = ([0.3, -1.2], [2.0, 0.7]);
        let sweep: Vec<(f64, BoundaryTrace<f64>)> = (0..8)
            .map(|i| {
                let h = 2f64.powi(4 + 2 * i);
                let vals = (0..2).map(|j| leading.values()[j] + a[j] * h.powf(-0.5) + b[j] * h.powf(-0.4)).collect();
                (h, BoundaryTrace::new(g.clone(), vals, Subset::All).unwrap())
            })
            .collect();
        let fit = fit_expansion(&sweep, &leading, &p).unwrap();
        for j in 0..2 {
            assert!((fit.a.values()[j] - a[j]).abs() < 1e-8);
            assert!((fit.b.values()[j] - b[j]).abs() < 1e-8);
        }
        assert!(fit.dominant_exponent < 0.0 && fit.dominant_exponent > -1.0);
        assert!(fit_expansion(&sweep[..5], &leading, &p).is_err());
        let p1 = ProblemParams::new(2.0, 1.0).unwrap();
        assert!(matches!(fit_expansion(&sweep, &leading, &p1), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn supersolution_fault_injection() {
        let g = Arc::new(Grid::<f64>::interval(5, 1.0).unwrap());
        let time = TimeGrid::new(1.0, 4).unwrap();
        let v = SpaceTimeField::from_fn(&g, time, |t, x| t * x[0]);
        let r = supersolution_check(&v, &v).unwrap();
        assert!(r.holds && r.max_violation == 0.0);
        let bad = v.map(|z| z + 0.1);
        let r = supersolution_check(&v, &bad).unwrap();
        assert!(!r.holds && (r.max_violation - 0.1).abs() < 1e-12);
    }
}
