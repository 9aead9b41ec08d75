//! Local partial-data machinery in the normalized geometry
//! `Omega = {|x + e1| < 1}`, tangent to `{x1 = 0}` at the origin.
//!
//! The chain is: a positive harmonic barrier `U0` vanishing on Gamma, the
//! density `F = delta_eps U0^(1/m - 1)`, complex geometrical optics (CGO)
//! solutions `exp(-(i/h) x.zeta) + R`, and the Segal-Bargmann transform of
//! `F`, whose weighted decay near the origin certifies that `F` vanishes on a
//! slab `{|x1| <= delta}`.
//!
//! The vector `i e1 + e2` is called `sigma_cgo` and the radius parameter of
//! the admissible ball `eps_r`, to keep them apart from the exponent `sigma`
//! and the coefficient `eps`.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::dense::{least_squares, t_quantile, Matrix};
use crate::error::{Error, Result};
use crate::grid::{boundary_flux, check_same, BoundaryLabel, BoundaryTrace, EllipticOperator, Grid, ScalarField, SolverOptions, Subset};
use crate::real::Real;

pub type C64 = Complex64;

/// `i e1 + e2`.
pub fn sigma_cgo() -> [C64; 2] {
    [C64::i(), C64::new(1.0, 0.0)]
}

fn dot(a: &[C64; 2], b: &[C64; 2]) -> C64 {
    a[0] * b[0] + a[1] * b[1]
}

/// A complex vector with `zeta . zeta = 0` (bilinear square).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NullVector {
    pub re: [f64; 2],
    pub im: [f64; 2],
    pub a: f64,
}

impl NullVector {
    pub fn components(&self) -> [C64; 2] {
        [C64::new(self.re[0], self.im[0]), C64::new(self.re[1], self.im[1])]
    }

    fn from_components(z: [C64; 2], a: f64) -> Self {
        Self { re: [z[0].re, z[1].re], im: [z[0].im, z[1].im], a }
    }

    /// `a sigma_cgo`.
    pub fn model(a: f64) -> Self {
        let s = sigma_cgo();
        Self::from_components([s[0] * a, s[1] * a], a)
    }

    /// `|zeta . zeta|`.
    pub fn null_residual(&self) -> f64 {
        let z = self.components();
        dot(&z, &z).norm()
    }

    pub fn norm(&self) -> f64 {
        (self.re[0].powi(2) + self.re[1].powi(2) + self.im[0].powi(2) + self.im[1].powi(2)).sqrt()
    }
}

/// Splits `z = zeta + eta` with `zeta^2 = eta^2 = 0`, `zeta` on the branch
/// near `a sigma_cgo` and `eta` near `-a conj(sigma_cgo)`.
///
/// In 2D every null vector is a multiple of `(1, -i)` or `(1, i)`, so
/// `zeta = p (1, -i)`, `eta = r (1, i)` with `p = (z1 + i z2)/2`,
/// `r = (z1 - i z2)/2`. Multiplication by `+-i` is exact, hence so are the
/// null conditions.
pub fn nullvector_decompose(z: [C64; 2], a: f64, eps_r: f64) -> Result<(NullVector, NullVector)> {
    if !(a > 0.0) || !(eps_r > 0.0) {
        return Err(Error::InvalidParameter("a and eps_r must be positive".into()));
    }
    let centre = [C64::new(0.0, 2.0 * a), C64::new(0.0, 0.0)];
    let dist = ((z[0] - centre[0]).norm_sqr() + (z[1] - centre[1]).norm_sqr()).sqrt();
    if !(dist < 2.0 * eps_r * a) {
        return Err(Error::Inadmissible(format!("|z - 2ia e1| = {dist:e} outside the ball of radius {:e}", 2.0 * eps_r * a)));
    }
    let i = C64::i();
    let p = (z[0] + i * z[1]) * 0.5;
    let r = (z[0] - i * z[1]) * 0.5;
    let first = [p, -i * p];
    let second = [r, i * r];
    // the swapped branch is also a decomposition; keep the one near a sigma
    let model = NullVector::model(a).components();
    let gap = |v: &[C64; 2]| ((v[0] - model[0]).norm_sqr() + (v[1] - model[1]).norm_sqr()).sqrt();
    let (zeta, eta) = if gap(&first) <= gap(&second) { (first, second) } else { (second, first) };
    if zeta[0].im < 0.0 {
        return Err(Error::Inadmissible("decomposition has Im zeta1 < 0".into()));
    }
    Ok((NullVector::from_components(zeta, a), NullVector::from_components(eta, a)))
}

/// Disk grid of `Omega = {|x + e1| <= 1}`, `Gamma = {x1 <= -2c}`, and the
/// cutoff `chi`: 1 on `{x1 <= -2c}`, 0 on `{x1 >= -c}`, smoothstep between.
#[derive(Debug, Clone)]
pub struct NormalizedGeometry<S> {
    pub grid: Arc<Grid<S>>,
    pub c: f64,
    pub chi: ScalarField<S>,
}

pub fn cutoff(x1: f64, c: f64) -> f64 {
    let s = ((-c - x1) / c).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

impl<S: Real> NormalizedGeometry<S> {
    pub fn new(n: usize, c: f64) -> Result<Self> {
        if !(c > 0.0) || c >= 0.5 {
            return Err(Error::InvalidParameter(format!("need 0 < c < 1/2, got {c}")));
        }
        let grid = Grid::disk(n, [S::lit(-1.0), S::zero()], S::one())?.with_gamma(|x| x[0].f64() <= -2.0 * c)?;
        let grid = Arc::new(grid);
        let chi = ScalarField::from_fn(&grid, |x| S::lit(cutoff(x[0].f64(), c)));
        let geom = Self { grid, c, chi };
        geom.check()?;
        Ok(geom)
    }

    /// `chi = 1` on Gamma, `chi = 0` on `{x1 >= -c}`.
    pub fn check(&self) -> Result<()> {
        for (&n, &l) in self.grid.boundary_nodes().iter().zip(self.grid.boundary_labels()) {
            if l == BoundaryLabel::Gamma && self.chi.get(n) != S::one() {
                return Err(Error::InvalidData(format!("chi != 1 at Gamma node {n}")));
            }
        }
        for n in 0..self.grid.node_count() {
            if self.grid.coord(n)[0].f64() >= -self.c && self.chi.get(n) != S::zero() {
                return Err(Error::InvalidData(format!("chi != 0 at node {n} with x1 >= -c")));
            }
        }
        Ok(())
    }

    fn unit_gamma(&self) -> ScalarField<S> {
        ScalarField::constant(&self.grid, S::one())
    }

    pub fn gamma_nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.grid.boundary_labels().iter().enumerate().filter(|(_, &l)| l == BoundaryLabel::Gamma).map(|(k, _)| (k, self.grid.boundary_nodes()[k]))
    }
}

/// Positive harmonic function vanishing on Gamma with strictly negative
/// outward flux there.
#[derive(Debug, Clone)]
pub struct Barrier<S> {
    pub field: ScalarField<S>,
    pub flux: BoundaryTrace<S>,
    /// Number of trial traces used.
    pub used: usize,
}

/// Accumulates harmonic extensions of the trial traces until
/// `d_nu U0 < -1e-6 max U0` on every Gamma node.
pub fn barrier_u0<S: Real>(geom: &NormalizedGeometry<S>, trials: &[BoundaryTrace<S>], opts: &SolverOptions) -> Result<Barrier<S>> {
    if trials.is_empty() {
        return Err(Error::BarrierCoverage("no trial traces".into()));
    }
    let grid = &geom.grid;
    for (j, t) in trials.iter().enumerate() {
        check_same(grid, t.grid())?;
        for ((&v, &l), &n) in t.values().iter().zip(grid.boundary_labels()).zip(grid.boundary_nodes()) {
            if v < S::zero() || (l == BoundaryLabel::Gamma && v != S::zero()) {
                return Err(Error::InvalidData(format!("trial trace {j} is negative or nonzero on Gamma at node {n}")));
            }
        }
    }
    let gamma = geom.unit_gamma();
    let op = EllipticOperator::new(&gamma)?;
    let zero = ScalarField::zeros(grid);
    let mut acc = ScalarField::zeros(grid);
    for (j, t) in trials.iter().enumerate() {
        let u = op.solve(&zero, &t.restricted(Subset::All), opts)?;
        acc = acc.add(&u)?;
        let flux = boundary_flux(&acc, &gamma)?;
        let threshold = S::lit(1e-6) * acc.max();
        let covered = geom.gamma_nodes().all(|(k, _)| flux.values()[k] < -threshold);
        if covered && acc.max() > S::zero() {
            return Ok(Barrier { field: acc, flux, used: j + 1 });
        }
    }
    Err(Error::BarrierCoverage(format!("{} trial traces do not give negative flux on all of Gamma", trials.len())))
}

/// Nonnegative traces on Sigma: first `sin(pi t)` over the whole arc
/// (`t` the normalized angle), then `count - 1` narrow `cos^2` bumps.
pub fn sigma_bump_traces<S: Real>(grid: &Arc<Grid<S>>, count: usize) -> Vec<BoundaryTrace<S>> {
    let labels = grid.boundary_labels();
    // arc parameter: angle about the disk centre
    let angle = |n: usize| {
        let x = grid.coord(n);
        x[1].f64().atan2(x[0].f64() + 1.0)
    };
    let sig: Vec<f64> = grid.boundary_nodes().iter().zip(labels).filter(|(_, &l)| l == BoundaryLabel::Sigma).map(|(&n, _)| angle(n)).collect();
    let lo = sig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let narrow = count.saturating_sub(1).max(1);
    let width = span / narrow as f64;
    let profile = |j: usize, t: f64| -> f64 {
        use std::f64::consts::PI;
        if j == 0 {
            // strictly positive on Sigma; zero only past its end nodes
            let t = (t - lo + 0.5 * width / narrow as f64) / (span + width / narrow as f64);
            return (PI * t.clamp(0.0, 1.0)).sin();
        }
        let d = (t - lo - (j as f64 - 0.5) * width) / width;
        if d.abs() < 1.0 {
            (0.5 * PI * d).cos().powi(2)
        } else {
            0.0
        }
    };
    (0..count)
        .map(|j| {
            let vals = grid
                .boundary_nodes()
                .iter()
                .zip(labels)
                .map(|(&n, &l)| if l == BoundaryLabel::Gamma { S::zero() } else { S::lit(profile(j, angle(n))) })
                .collect();
            BoundaryTrace::new(grid.clone(), vals, Subset::All).expect("trace length matches grid")
        })
        .collect()
}

/// `F = delta_eps U0^(1/m - 1)` with the singular layer at Gamma capped.
#[derive(Debug, Clone)]
pub struct FDensity<S> {
    pub field: ScalarField<S>,
    pub l1: f64,
    /// Nodes where `U0 < floor`.
    pub flagged: Vec<bool>,
    /// L1 mass carried by flagged nodes.
    pub flagged_mass: f64,
}

/// `floor` defaults to the grid spacing in callers.
pub fn f_density<S: Real>(delta_eps: &ScalarField<S>, u0: &ScalarField<S>, m: f64, floor: f64) -> Result<FDensity<S>> {
    check_same(delta_eps.grid(), u0.grid())?;
    if !(m > 1.0) {
        return Err(Error::InvalidParameter("need m > 1 so that 1/m - 1 < 0".into()));
    }
    if !(floor > 0.0) {
        return Err(Error::InvalidParameter("floor must be positive".into()));
    }
    let grid = delta_eps.grid();
    let p = 1.0 / m - 1.0;
    let mut vals = vec![S::zero(); grid.node_count()];
    let mut flagged = vec![false; grid.node_count()];
    for n in 0..grid.node_count() {
        if !grid.is_in_domain(n) {
            continue;
        }
        let u = u0.get(n).f64();
        if u < -1e-12 {
            return Err(Error::InvalidData(format!("U0 negative at node {n}")));
        }
        let base = if u < floor {
            flagged[n] = true;
            floor
        } else {
            u
        };
        vals[n] = delta_eps.get(n) * S::lit(base.powf(p));
    }
    let field = ScalarField::new(grid.clone(), vals)?;
    let w = grid.node_weights();
    let l1 = (0..w.len()).map(|n| (w[n] * field.get(n).abs()).f64()).sum();
    let flagged_mass = (0..w.len()).filter(|&n| flagged[n]).map(|n| (w[n] * field.get(n).abs()).f64()).sum();
    Ok(FDensity { field, l1, flagged, flagged_mass })
}

/// A CGO solution `U = exp(-(i/h) x.zeta) + R`, `R` harmonic with
/// `R = -exp(-(i/h) x.zeta) chi` on the boundary.
#[derive(Debug, Clone)]
pub struct Cgo<S> {
    pub re: ScalarField<S>,
    pub im: ScalarField<S>,
    pub remainder_sup: f64,
}

fn cgo_phase(x: [f64; 2], zeta: &[C64; 2], h: f64) -> C64 {
    let xz = zeta[0] * x[0] + zeta[1] * x[1];
    (-C64::i() * xz / h).exp()
}

pub fn cgo_solution<S: Real>(geom: &NormalizedGeometry<S>, zeta: &NullVector, h: f64, chi: &ScalarField<S>, opts: &SolverOptions) -> Result<Cgo<S>> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("h must be positive".into()));
    }
    if zeta.im[0] < 0.0 {
        return Err(Error::Inadmissible("Im zeta1 < 0".into()));
    }
    check_same(&geom.grid, chi.grid())?;
    let grid = &geom.grid;
    let z = zeta.components();
    let pt = |n: usize| {
        let x = grid.coord(n);
        [x[0].f64(), x[1].f64()]
    };
    let data: Vec<C64> = grid.boundary_nodes().iter().map(|&n| -cgo_phase(pt(n), &z, h) * chi.get(n).f64()).collect();
    let gamma = geom.unit_gamma();
    let op = EllipticOperator::new(&gamma)?;
    let zero = ScalarField::zeros(grid);
    let solve = |part: fn(&C64) -> f64| -> Result<ScalarField<S>> {
        let t = BoundaryTrace::new(grid.clone(), data.iter().map(|v| S::lit(part(v))).collect(), Subset::All)?;
        if t.max_abs() == S::zero() {
            return Ok(ScalarField::zeros(grid));
        }
        op.solve(&zero, &t, opts)
    };
    let (r_re, r_im) = rayon::join(|| solve(|v| v.re), || solve(|v| v.im));
    let (r_re, r_im) = (r_re?, r_im?);
    let mut remainder_sup = 0f64;
    let mut re = vec![S::zero(); grid.node_count()];
    let mut im = vec![S::zero(); grid.node_count()];
    for n in 0..grid.node_count() {
        if !grid.is_in_domain(n) {
            continue;
        }
        let r = C64::new(r_re.get(n).f64(), r_im.get(n).f64());
        remainder_sup = remainder_sup.max(r.norm());
        let u = cgo_phase(pt(n), &z, h) + r;
        re[n] = S::lit(u.re);
        im[n] = S::lit(u.im);
    }
    Ok(Cgo { re: ScalarField::new(grid.clone(), re)?, im: ScalarField::new(grid.clone(), im)?, remainder_sup })
}

/// Fit of `ln y = A + p ln h - rate / h`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayFit {
    pub rate: f64,
    pub power: f64,
    pub rate_std_err: f64,
    /// Two-sided 95% confidence interval on `rate`.
    pub rate_ci: (f64, f64),
}

pub fn fit_decay(hs: &[f64], ys: &[f64]) -> Result<DecayFit> {
    if hs.len() != ys.len() || hs.len() < 4 {
        return Err(Error::InvalidData("decay fit needs at least 4 matched samples".into()));
    }
    if ys.iter().any(|&y| !(y > 0.0) || !y.is_finite()) {
        return Err(Error::InvalidData("decay fit needs positive finite samples".into()));
    }
    let x = Matrix::from_rows(&hs.iter().map(|&h| vec![1.0, h.ln(), -1.0 / h]).collect::<Vec<_>>());
    let y: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let fit = least_squares(&x, &y)?;
    let se = fit.std_err(2);
    let t = t_quantile(0.975, hs.len() - 3);
    Ok(DecayFit { rate: fit.coef[2], power: fit.coef[1], rate_std_err: se, rate_ci: (fit.coef[2] - t * se, fit.coef[2] + t * se) })
}

/// CGO remainder sweep: `sup |R|` per `h` and the fitted exponential rate,
/// to be compared with `c Im zeta1`.
#[derive(Debug, Clone, Serialize)]
pub struct RemainderDecay {
    pub hs: Vec<f64>,
    pub sups: Vec<f64>,
    pub fit: DecayFit,
    pub predicted_rate: f64,
    pub monotone: bool,
}

pub fn cgo_remainder_decay<S: Real>(geom: &NormalizedGeometry<S>, zeta: &NullVector, hs: &[f64], opts: &SolverOptions) -> Result<RemainderDecay> {
    let sups = hs.par_iter().map(|&h| cgo_solution(geom, zeta, h, &geom.chi, opts).map(|c| c.remainder_sup)).collect::<Result<Vec<_>>>()?;
    let fit = fit_decay(hs, &sups)?;
    let mut order: Vec<usize> = (0..hs.len()).collect();
    order.sort_by(|&a, &b| hs[a].total_cmp(&hs[b]));
    let monotone = order.windows(2).all(|w| sups[w[0]] <= sups[w[1]]);
    Ok(RemainderDecay { hs: hs.to_vec(), sups, fit, predicted_rate: geom.c * zeta.im[0], monotone })
}

fn domain_points<S: Real>(f: &FDensity<S>) -> Vec<(f64, [f64; 2], f64)> {
    let grid = f.field.grid();
    let w = grid.node_weights();
    (0..grid.node_count())
        .filter(|&n| grid.is_in_domain(n) && f.field.get(n) != S::zero())
        .map(|n| {
            let x = grid.coord(n);
            (w[n].f64(), [x[0].f64(), x[1].f64()], f.field.get(n).f64())
        })
        .collect()
}

/// `int exp(-(i/h) x.z) F(x) dx` by nodal quadrature.
pub fn fourier_functional<S: Real>(f: &FDensity<S>, z: [C64; 2], h: f64) -> C64 {
    domain_points(f).iter().map(|&(w, x, v)| cgo_phase(x, &z, h) * (w * v)).sum()
}

/// `TF(z) = int exp(-(z - y)^2 / 2h) F(y) dy`, bilinear square.
pub fn segal_bargmann<S: Real>(f: &FDensity<S>, z: [C64; 2], h: f64) -> C64 {
    domain_points(f)
        .iter()
        .map(|&(w, y, v)| {
            let d = [z[0] - y[0], z[1] - y[1]];
            (-dot(&d, &d) / (2.0 * h)).exp() * (w * v)
        })
        .sum()
}

/// The weight `Phi(z1)`: `|Im z1|^2`, minus `|Re z1|^2` when `Re z1 >= 0`.
pub fn weight_phi(z1: C64) -> f64 {
    if z1.re >= 0.0 {
        z1.im * z1.im - z1.re * z1.re
    } else {
        z1.im * z1.im
    }
}

/// Both a priori bounds on `|TF(z)|`; the sharp one uses `Omega ⊂ {x1 <= 0}`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TransformBounds {
    pub value: f64,
    pub coarse: f64,
    pub sharp: f64,
}

impl TransformBounds {
    pub fn holds(&self) -> bool {
        let tol = 1e-12;
        self.value <= self.coarse * (1.0 + tol) && self.value <= self.sharp * (1.0 + tol)
    }
}

pub fn transform_bounds<S: Real>(f: &FDensity<S>, z: [C64; 2], h: f64) -> TransformBounds {
    let value = segal_bargmann(f, z, h).norm();
    let im2 = z[0].im.powi(2) + z[1].im.powi(2);
    let l1 = f.l1;
    let coarse = (im2 / (2.0 * h)).exp() * l1;
    let sharp = if z[0].re >= 0.0 { ((im2 - z[0].re.powi(2)) / (2.0 * h)).exp() * l1 } else { coarse };
    TransformBounds { value, coarse, sharp }
}

/// `exp(-Phi(z1)/2h) |TF(z1, x')|` for real `z1 >= 0`, evaluated in the
/// combined exponent `-(y1^2 - 2 z1 y1 + |x' - y'|^2) / 2h` so that it neither
/// overflows nor underflows prematurely.
pub fn weighted_transform<S: Real>(f: &FDensity<S>, z1: f64, x2: f64, h: f64) -> f64 {
    weighted_at(&domain_points(f), z1, x2, h)
}

fn weighted_at(points: &[(f64, [f64; 2], f64)], z1: f64, x2: f64, h: f64) -> f64 {
    let ex = |y: [f64; 2]| -(y[0] * y[0] - 2.0 * z1 * y[0] + (x2 - y[1]).powi(2)) / (2.0 * h);
    let top = points.iter().map(|&(_, y, _)| ex(y)).fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return 0.0;
    }
    let s: f64 = points.iter().map(|&(w, y, v)| w * v * (ex(y) - top).exp()).sum();
    s.abs() * top.exp()
}

/// Detector settings.
#[derive(Debug, Clone, Serialize)]
pub struct DetectorConfig {
    pub hs: Vec<f64>,
    pub a: f64,
    pub eps_r: f64,
    /// Smallest slab half-width the detector is asked to certify.
    pub min_slab: f64,
}

impl DetectorConfig {
    pub fn new(a: f64, eps_r: f64) -> Self {
        let hs = (0..8).map(|k| 0.05 * (0.1f64).powf(k as f64 / 7.0)).collect();
        Self { hs, a, eps_r, min_slab: 0.1 }
    }

    /// Test set: `z1 in {1/2, 1} * 2 eps_r a`, `x' in {-0.45, 0, 0.45} eps_r a`.
    pub fn test_points(&self) -> Vec<(f64, f64)> {
        let s = self.eps_r * self.a;
        let mut pts = Vec::new();
        for z1 in [s, 2.0 * s] {
            for x2 in [-0.45 * s, 0.0, 0.45 * s] {
                pts.push((z1, x2));
            }
        }
        pts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Vanishing,
    NonVanishing,
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct PointReport {
    pub z1: f64,
    pub x2: f64,
    pub weighted: Vec<f64>,
    pub fit: Option<DecayFit>,
    /// Rate a slab of half-width `min_slab` forces.
    pub required_rate: f64,
    /// CI of `required_rate - rate`: below 0 certifies the slab, above 0
    /// refutes it.
    pub margin_ci: (f64, f64),
    pub delta: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct SlabReport {
    pub points: Vec<PointReport>,
    pub delta: f64,
    pub verdict: Verdict,
    /// Margin CI of the decisive point.
    pub margin_ci: (f64, f64),
}

/// Slab half-width whose vanishing forces `rate` at real `z1`:
/// `(2 z1 delta + delta^2)/2 = rate`.
pub fn slab_from_rate(z1: f64, rate: f64) -> f64 {
    -z1 + (z1 * z1 + 2.0 * rate.max(0.0)).sqrt()
}

/// Hypothesis test for `F = 0` on `{-delta <= x1 <= 0}` near the origin.
pub fn vanishing_slab_detect<S: Real>(f: &FDensity<S>, geom: &NormalizedGeometry<S>, cfg: &DetectorConfig) -> Result<SlabReport> {
    check_same(f.field.grid(), &geom.grid)?;
    let points = domain_points(f);
    let width = 2.0;
    let reports: Vec<PointReport> = cfg
        .test_points()
        .par_iter()
        .map(|&(z1, x2)| {
            let weighted: Vec<f64> = cfg.hs.iter().map(|&h| weighted_at(&points, z1, x2, h)).collect();
            let required_rate = (2.0 * z1 * cfg.min_slab + cfg.min_slab.powi(2)) / 2.0;
            if weighted.iter().all(|&w| w == 0.0) {
                return Ok(PointReport {
                    z1,
                    x2,
                    weighted,
                    fit: None,
                    required_rate,
                    margin_ci: (f64::NEG_INFINITY, f64::NEG_INFINITY),
                    delta: width,
                    verdict: Verdict::Vanishing,
                });
            }
            let fit = fit_decay(&cfg.hs, &weighted)?;
            let margin_ci = (required_rate - fit.rate_ci.1, required_rate - fit.rate_ci.0);
            let verdict = if margin_ci.1 < 0.0 {
                Verdict::Vanishing
            } else if margin_ci.0 > 0.0 {
                Verdict::NonVanishing
            } else {
                Verdict::Inconclusive
            };
            Ok(PointReport { z1, x2, weighted, fit: Some(fit), required_rate, margin_ci, delta: slab_from_rate(z1, fit.rate), verdict })
        })
        .collect::<Result<_>>()?;
    let delta = reports.iter().map(|r| r.delta).fold(width, f64::min);
    let (verdict, decisive) = if let Some(r) = reports.iter().find(|r| r.verdict == Verdict::NonVanishing) {
        (Verdict::NonVanishing, r)
    } else if reports.iter().all(|r| r.verdict == Verdict::Vanishing) {
        // the weakest certification
        (Verdict::Vanishing, reports.iter().max_by(|a, b| a.margin_ci.1.total_cmp(&b.margin_ci.1)).expect("test set is nonempty"))
    } else {
        (Verdict::Inconclusive, reports.iter().find(|r| r.verdict == Verdict::Inconclusive).expect("some point is inconclusive"))
    };
    let margin_ci = decisive.margin_ci;
    Ok(SlabReport { points: reports, delta, verdict, margin_ci })
}

/// `int F U_i W_j` over partial-data basis pairs: the linearization of the
/// vanishing identity around `U0`.
pub fn identity_pairings<S: Real>(f: &FDensity<S>, basis: &[ScalarField<S>]) -> Result<Matrix<f64>> {
    let w = f.field.grid().node_weights();
    for b in basis {
        check_same(f.field.grid(), b.grid())?;
    }
    let rows: Vec<Vec<f64>> = basis
        .iter()
        .map(|u| {
            basis
                .iter()
                .map(|v| (0..w.len()).map(|n| (w[n] * f.field.get(n) * u.get(n) * v.get(n)).f64()).sum())
                .collect()
        })
        .collect();
    Ok(Matrix::from_rows(&rows))
}
