//! The substitution `v = u^m` and the weighted time integral
//! `V(x) = int_0^T (T - t)^alpha v(t, x) dt` with its moments
//! `N_t = eps alpha int (T - t)^(alpha - 1) v^(1/m)` and
//! `N_a = lambda int (T - t)^alpha v^(q/m)`.
//!
//! All time integrals use the trapezoid rule on the trajectory's levels.
//! The Hoelder constants are evaluated with the same rule, so the discrete
//! inequalities hold exactly and can be asserted node by node.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{CoefficientSet, ProblemParams, SpaceTimeField, TimeGrid};
use crate::grid::{check_same, div_gamma_grad, ScalarField};
use crate::real::Real;
use crate::special;

/// Final time, weight exponent and boundary amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TransformParams<S> {
    pub t_final: S,
    pub alpha: S,
    pub h: S,
}

impl<S: Real> TransformParams<S> {
    pub fn new(params: &ProblemParams<S>, t_final: S, alpha: S, h: S) -> Result<Self> {
        let min_alpha = (params.m - S::one()).recip();
        if !(alpha > min_alpha) {
            return Err(Error::InvalidParameter(format!("alpha = {alpha} must exceed m' - 1 = {min_alpha}")));
        }
        if !(t_final > S::zero()) || !t_final.is_finite() {
            return Err(Error::InvalidParameter(format!("T = {t_final} must be positive")));
        }
        if !(h > S::one()) {
            return Err(Error::InvalidParameter(format!("h = {h} must exceed 1")));
        }
        Ok(Self { t_final, alpha, h })
    }

    /// `c(T, alpha, m) = int_0^T (T - t)^alpha t^m dt`.
    pub fn c(&self, m: S) -> S {
        S::lit(special::weighted_power_integral(self.t_final.f64(), self.alpha.f64(), m.f64()))
    }
}

/// `max(2, 1/(m - 1) + 1)`.
pub fn auto_alpha<S: Real>(m: S) -> S {
    S::lit(2.0).max((m - S::one()).recip() + S::one())
}

/// Halves `T` from 1 until `T^(alpha/m' - 1/m) <= 0.1` and
/// `T^(alpha + m/(m - q)) <= 0.1`.
pub fn auto_t<S: Real>(params: &ProblemParams<S>, alpha: S) -> Result<S> {
    let (m, q) = (params.m.f64(), params.q.f64());
    let e1 = alpha.f64() / params.m_prime().f64() - 1.0 / m;
    let e2 = alpha.f64() + m / (m - q);
    if !(e1 > 0.0 && e2 > 0.0) {
        return Err(Error::InvalidParameter(format!("no small T absorbs the transform terms (exponents {e1}, {e2})")));
    }
    let mut t = 1.0f64;
    for _ in 0..200 {
        if t.powf(e1) <= 0.1 && t.powf(e2) <= 0.1 {
            return Ok(S::lit(t));
        }
        t *= 0.5;
    }
    unreachable!("positive exponents make T^e small eventually")
}

/// `T^(1+alpha+m) Gamma(1+alpha) Gamma(1+m) / Gamma(2+alpha+m)`.
pub fn time_weight_constant(t_final: f64, alpha: f64, m: f64) -> Result<f64> {
    if !(t_final > 0.0) || !(alpha > -1.0) || !(m > -1.0) {
        return Err(Error::InvalidParameter(format!("need T > 0, alpha > -1, m > -1 (got {t_final}, {alpha}, {m})")));
    }
    Ok(special::weighted_power_integral(t_final, alpha, m))
}

/// Independent tanh-sinh evaluation of the same integral.
pub fn time_weight_quadrature(t_final: f64, alpha: f64, m: f64) -> f64 {
    special::tanh_sinh_ends(|_, from_zero, to_t| to_t.powf(alpha) * from_zero.powf(m), 0.0, t_final, 1e-14)
}

/// Node-wise `v = u^m`.
pub fn v_of_u<S: Real>(u: &SpaceTimeField<S>, m: S) -> Result<SpaceTimeField<S>> {
    if u.min() < S::zero() {
        return Err(Error::InvalidData(format!("v = u^m needs u >= 0 (min {})", u.min())));
    }
    Ok(u.map(|z| z.powf(m)))
}

/// Trapezoid weights `omega_n (T - t_n)^p` on the levels. Levels with
/// `T - t_n = 0` get weight 0 regardless of `p`.
pub fn kernel_weights<S: Real>(time: &TimeGrid<S>, p: S) -> Vec<S> {
    let t_final = time.t_final();
    time.trapezoid_weights()
        .into_iter()
        .zip(time.times())
        .map(|(w, t)| {
            let d = t_final - t;
            if d > S::zero() {
                w * d.powf(p)
            } else {
                S::zero()
            }
        })
        .collect()
}

fn weighted_sum<S: Real>(v: &SpaceTimeField<S>, weights: &[S], f: impl Fn(S) -> S) -> ScalarField<S> {
    let grid = v.grid();
    let mut out = vec![S::zero(); grid.node_count()];
    for (level, &w) in v.levels().iter().zip(weights) {
        if w == S::zero() {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(level.values()) {
            *o += w * f(x);
        }
    }
    ScalarField::new(grid.clone(), out).expect("finite weighted sum")
}

fn check_time<S: Real>(v: &SpaceTimeField<S>, params: &TransformParams<S>) -> Result<()> {
    let t = v.time().t_final();
    if (t - params.t_final).abs() > S::lit(1e-12) * params.t_final {
        return Err(Error::TimeGridMismatch(format!("trajectory ends at {t}, transform uses T = {}", params.t_final)));
    }
    Ok(())
}

/// `V = sum_n omega_n (T - t_n)^alpha v_n`.
pub fn transform_v<S: Real>(v: &SpaceTimeField<S>, params: &TransformParams<S>) -> Result<ScalarField<S>> {
    check_time(v, params)?;
    if v.min() < S::zero() {
        return Err(Error::InvalidData("transform needs v >= 0".into()));
    }
    Ok(weighted_sum(v, &kernel_weights(v.time(), params.alpha), |x| x))
}

/// `(N_t, N_a)` of a trajectory `v`.
pub fn moments<S: Real>(
    v: &SpaceTimeField<S>,
    coeffs: &CoefficientSet<S>,
    params: &TransformParams<S>,
    problem: &ProblemParams<S>,
) -> Result<(ScalarField<S>, ScalarField<S>)> {
    check_time(v, params)?;
    check_same(v.grid(), coeffs.grid())?;
    if !(params.alpha >= S::one()) {
        return Err(Error::InvalidParameter(format!("moments need alpha >= 1 for the trapezoid rule (alpha = {})", params.alpha)));
    }
    if v.min() < S::zero() {
        return Err(Error::InvalidData("moments need v >= 0".into()));
    }
    let (m, q) = (problem.m, problem.q);
    let wt = kernel_weights(v.time(), params.alpha - S::one());
    let wa = kernel_weights(v.time(), params.alpha);
    let nt = weighted_sum(v, &wt, |x| x.powf(m.recip())).zip_with(&coeffs.eps, |s, e| params.alpha * e * s)?;
    let na = weighted_sum(v, &wa, |x| x.powf(q / m)).zip_with(&coeffs.lambda, |s, l| l * s)?;
    Ok((nt, na))
}

/// `V` with its moments.
#[derive(Debug, Clone)]
pub struct TransformBundle<S> {
    pub v_transform: ScalarField<S>,
    pub n_t: ScalarField<S>,
    pub n_a: ScalarField<S>,
    pub time: TimeGrid<S>,
    pub params: TransformParams<S>,
}

impl<S: Real> TransformBundle<S> {
    pub fn new(v: &SpaceTimeField<S>, coeffs: &CoefficientSet<S>, params: &TransformParams<S>, problem: &ProblemParams<S>) -> Result<Self> {
        let (n_t, n_a) = moments(v, coeffs, params, problem)?;
        Ok(Self { v_transform: transform_v(v, params)?, n_t, n_a, time: *v.time(), params: *params })
    }

    /// CSV with columns `node,x[,y],V,N_t,N_a`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let grid = self.v_transform.grid();
        if grid.dim() == 1 {
            writeln!(w, "node,x,V,N_t,N_a")?;
        } else {
            writeln!(w, "node,x,y,V,N_t,N_a")?;
        }
        for n in 0..grid.node_count() {
            if !grid.is_in_domain(n) {
                continue;
            }
            let x = grid.coord(n);
            let (v, a, b) = (self.v_transform.get(n).f64(), self.n_t.get(n).f64(), self.n_a.get(n).f64());
            if grid.dim() == 1 {
                writeln!(w, "{},{},{},{},{}", n, x[0].f64(), v, a, b)?;
            } else {
                writeln!(w, "{},{},{},{},{},{}", n, x[0].f64(), x[1].f64(), v, a, b)?;
            }
        }
        Ok(())
    }
}

/// Residual of `div(gamma grad V) = N_t + N_a - N_f - eps T^alpha u(0)` at
/// interior nodes, where `N_f = int (T - t)^alpha f`. The last two terms
/// vanish for zero source and zero initial value.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityReport {
    pub max_residual: f64,
    /// `max |N_t| + |N_a| + |N_f|`, the natural scale of the residual.
    pub scale: f64,
}

/// `C` in the node-wise identity bound `C (dt + spacing^2)`, relative to the
/// moment scale; calibrated on the two forward oracles.
pub const IDENTITY_CONSTANT: f64 = 5.0;

impl IdentityReport {
    pub fn within(&self, dt: f64, spacing: f64) -> bool {
        self.max_residual <= IDENTITY_CONSTANT * (dt + spacing * spacing) * self.scale
    }
}

pub fn identity_residual<S: Real>(
    bundle: &TransformBundle<S>,
    coeffs: &CoefficientSet<S>,
    source: Option<&SpaceTimeField<S>>,
    initial: Option<&ScalarField<S>>,
) -> Result<IdentityReport> {
    let lv = div_gamma_grad(&bundle.v_transform, &coeffs.gamma)?;
    let grid = lv.grid().clone();
    let nf = match source {
        Some(f) => {
            if f.time() != &bundle.time {
                return Err(Error::TimeGridMismatch("source and trajectory time grids differ".into()));
            }
            weighted_sum(f, &kernel_weights(&bundle.time, bundle.params.alpha), |x| x)
        }
        None => ScalarField::zeros(&grid),
    };
    let t_alpha = bundle.params.t_final.powf(bundle.params.alpha);
    let mut max_residual = 0.0f64;
    let mut scale = 0.0f64;
    for &n in grid.interior_nodes() {
        let init = initial.map(|u| coeffs.eps.get(n) * t_alpha * u.get(n)).unwrap_or(S::zero());
        let rhs = bundle.n_t.get(n) + bundle.n_a.get(n) - nf.get(n) - init;
        max_residual = max_residual.max((lv.get(n) - rhs).abs().f64());
        scale = scale.max((bundle.n_t.get(n).abs() + bundle.n_a.get(n).abs() + nf.get(n).abs() + init.abs()).f64());
    }
    Ok(IdentityReport { max_residual, scale })
}

/// Outcome of the two Hoelder inequalities
/// `N_t <= C_t eps V^(1/m)` and `N_a <= C_a lambda V^(q/m)`.
#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    /// Constants from the discrete Hoelder inequality on the time levels.
    pub c_t: f64,
    pub c_a: f64,
    /// Their continuous counterparts
    /// `alpha T^(alpha/m' - 1/m) (alpha - m' + 1)^(-1/m')` and
    /// `(T^(alpha+1)/(alpha+1))^((m-q)/m)`.
    pub c_t_continuous: f64,
    pub c_a_continuous: f64,
    /// The alternative constant `T^(alpha + m/(m-q)) (alpha(1 - q/m) + 1)^(-m/(m-q))`.
    pub c_a_alternative: f64,
    /// Smallest `bound - lhs` over nodes (negative means violated).
    pub min_slack_t: f64,
    pub min_slack_a: f64,
    /// Largest `bound - lhs` over nodes.
    pub max_slack_t: f64,
    pub max_slack_a: f64,
    pub tolerance: f64,
    pub holds: bool,
    /// Whether the alternative constant also bounds `N_a` at every node.
    pub alternative_holds: bool,
}

/// Checks both inequalities node by node with tolerance `1e-6 * scale`.
pub fn verify_inequality<S: Real>(
    bundle: &TransformBundle<S>,
    coeffs: &CoefficientSet<S>,
    problem: &ProblemParams<S>,
) -> Result<InequalityReport> {
    check_same(bundle.v_transform.grid(), coeffs.grid())?;
    let (m, q) = (problem.m.f64(), problem.q.f64());
    let mp = problem.m_prime().f64();
    let alpha = bundle.params.alpha.f64();
    let t = bundle.params.t_final.f64();
    let sum = |p: f64| kernel_weights(&bundle.time, S::lit(p)).iter().map(|w| w.f64()).sum::<f64>();
    let c_t = alpha * sum(alpha - mp).powf(1.0 / mp);
    let c_a = sum(alpha).powf((m - q) / m);
    let c_t_continuous = alpha * t.powf(alpha / mp - 1.0 / m) * (alpha - mp + 1.0).powf(-1.0 / mp);
    let c_a_continuous = (t.powf(alpha + 1.0) / (alpha + 1.0)).powf((m - q) / m);
    let c_a_alternative = t.powf(alpha + m / (m - q)) * (alpha * (1.0 - q / m) + 1.0).powf(-m / (m - q));

    let grid = bundle.v_transform.grid();
    let mut scale = 0.0f64;
    let mut rows = Vec::new();
    for n in 0..grid.node_count() {
        if !grid.is_in_domain(n) {
            continue;
        }
        let v = bundle.v_transform.get(n).f64().max(0.0);
        let bt = c_t * coeffs.eps.get(n).f64() * v.powf(1.0 / m);
        let ba = c_a * coeffs.lambda.get(n).f64() * v.powf(q / m);
        let alt = c_a_alternative * coeffs.lambda.get(n).f64() * v.powf(q / m);
        let (nt, na) = (bundle.n_t.get(n).f64(), bundle.n_a.get(n).f64());
        scale = scale.max(bt.abs()).max(ba.abs()).max(nt.abs()).max(na.abs());
        rows.push((nt, na, bt, ba, alt));
    }
    let tolerance = 1e-6 * scale.max(f64::MIN_POSITIVE);
    let mut r = InequalityReport {
        c_t,
        c_a,
        c_t_continuous,
        c_a_continuous,
        c_a_alternative,
        min_slack_t: f64::INFINITY,
        min_slack_a: f64::INFINITY,
        max_slack_t: f64::NEG_INFINITY,
        max_slack_a: f64::NEG_INFINITY,
        tolerance,
        holds: true,
        alternative_holds: true,
    };
    for (nt, na, bt, ba, alt) in rows {
        r.min_slack_t = r.min_slack_t.min(bt - nt);
        r.min_slack_a = r.min_slack_a.min(ba - na);
        r.max_slack_t = r.max_slack_t.max(bt - nt);
        r.max_slack_a = r.max_slack_a.max(ba - na);
        if nt < -tolerance || na < -tolerance || nt > bt + tolerance || na > ba + tolerance {
            r.holds = false;
        }
        if na > alt + tolerance {
            r.alternative_holds = false;
        }
    }
    Ok(r)
}
