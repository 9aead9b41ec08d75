//! Recovery of `eps` (or `lambda`) from the correction terms of the
//! expansion.
//!
//! For gamma-harmonic `W`, Green's identity gives
//! `<gamma d_nu V_t, W> = w_t int eps V0^(1/m) W`. Differentiating along
//! `V0 = 1 + s H` at `s = 0` yields the bilinear data `int eps H W`, and the
//! map `eps -> (int eps H_i W_j)` is inverted on a coarse nodal
//! representation by Tikhonov-regularized least squares.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::dense::{cholesky_solve, singular_values, Matrix};
use crate::error::{Error, Result};
use crate::grid::{check_same, EllipticOperator, Grid, ScalarField, SolverOptions, Subset};
use crate::grid::{BoundaryLabel, BoundaryTrace};
use crate::real::Real;

/// Gamma-harmonic fields with their boundary traces.
#[derive(Debug, Clone)]
pub struct HarmonicBasis<S> {
    pub members: Vec<ScalarField<S>>,
    pub traces: Vec<BoundaryTrace<S>>,
    /// Whether each member is nonnegative.
    pub nonnegative: Vec<bool>,
    /// Members vanish on Gamma.
    pub partial: bool,
}

impl<S: Real> HarmonicBasis<S> {
    pub fn len(&self) -> usize {
        self.members.len()
    }
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
    pub fn grid(&self) -> &Arc<Grid<S>> {
        self.members[0].grid()
    }
}

/// Centre and half-width of the grid's bounding box.
fn frame<S: Real>(grid: &Grid<S>) -> ([f64; 2], f64) {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for n in 0..grid.node_count() {
        if grid.is_in_domain(n) {
            let x = grid.coord(n);
            for a in 0..2 {
                lo[a] = lo[a].min(x[a].f64());
                hi[a] = hi[a].max(x[a].f64());
            }
        }
    }
    let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let r = ((hi[0] - lo[0]) / 2.0).max((hi[1] - lo[1]) / 2.0).max(f64::MIN_POSITIVE);
    (c, r)
}

/// Boundary values of the `idx`-th full-data member: `1`, then
/// `Re z^n`, `Im z^n` for `n = 1, 2, ...` with `z` centred and scaled to the
/// grid. In 1D only `1` and `x` exist.
fn polynomial_trace(idx: usize, x: [f64; 2], c: [f64; 2], r: f64) -> f64 {
    if idx == 0 {
        return 1.0;
    }
    let n = idx.div_ceil(2) as i32;
    let z = num_complex::Complex64::new((x[0] - c[0]) / r, (x[1] - c[1]) / r).powi(n);
    if idx % 2 == 1 {
        z.re
    } else {
        z.im
    }
}

/// Harmonic extensions of `count` boundary traces, L2-normalized.
///
/// Full-data mode uses harmonic-polynomial traces; partial-data mode
/// (`partial = true`) uses nonnegative angular bumps supported on Sigma,
/// so every member vanishes on Gamma.
pub fn build_basis<S: Real>(gamma: &ScalarField<S>, count: usize, partial: bool, opts: &SolverOptions) -> Result<HarmonicBasis<S>> {
    if count == 0 {
        return Err(Error::InvalidParameter("basis needs at least one member".into()));
    }
    let grid = gamma.grid().clone();
    if grid.dim() == 1 && !partial && count > 2 {
        return Err(Error::InvalidParameter("only two independent harmonic functions exist in 1D".into()));
    }
    let (c, r) = frame(&grid);
    let labels = grid.boundary_labels();
    let bnodes = grid.boundary_nodes();
    let sigma_angles: Vec<f64> = bnodes
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == BoundaryLabel::Sigma)
        .map(|(&n, _)| {
            let x = grid.coord(n);
            (x[1].f64() - c[1]).atan2(x[0].f64() - c[0])
        })
        .collect();
    if partial && sigma_angles.is_empty() {
        return Err(Error::InvalidParameter("partial basis needs Sigma nodes".into()));
    }
    let traces: Vec<BoundaryTrace<S>> = (0..count)
        .map(|idx| {
            let vals: Vec<S> = bnodes
                .iter()
                .zip(labels)
                .map(|(&n, &label)| {
                    let x = grid.coord(n);
                    let x = [x[0].f64(), x[1].f64()];
                    if !partial {
                        return S::lit(polynomial_trace(idx, x, c, r));
                    }
                    if label == BoundaryLabel::Gamma {
                        return S::zero();
                    }
                    S::lit(sigma_bump(idx, count, (x[1] - c[1]).atan2(x[0] - c[0]), &sigma_angles))
                })
                .collect();
            BoundaryTrace::new(grid.clone(), vals, if partial { Subset::Sigma } else { Subset::All })
        })
        .collect::<Result<_>>()?;
    let op = EllipticOperator::new(gamma)?;
    let zero = ScalarField::zeros(&grid);
    let members: Vec<ScalarField<S>> = traces
        .par_iter()
        .map(|t| {
            let u = op.solve(&zero, t, opts)?;
            let norm = u.l2_norm();
            if !(norm > S::zero()) {
                return Err(Error::InvalidData("basis member with zero norm".into()));
            }
            Ok(u.scaled(norm.recip()))
        })
        .collect::<Result<_>>()?;
    let traces = members.iter().map(|m| m.trace()).collect::<Vec<_>>();
    let traces = traces
        .into_iter()
        .map(|t| if partial { t.restricted(Subset::Sigma) } else { t })
        .collect();
    let nonnegative = members.iter().map(|m| m.min() >= S::zero()).collect();
    Ok(HarmonicBasis { members, traces, nonnegative, partial })
}

/// `cos^2` bump number `idx` of `count`, spread evenly over the angular
/// range of Sigma. The range is unwrapped around the largest angular gap.
fn sigma_bump(idx: usize, count: usize, angle: f64, sigma_angles: &[f64]) -> f64 {
    use std::f64::consts::PI;
    let mut sorted = sigma_angles.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    // start the range just after the largest gap
    let mut start = sorted[0];
    let mut gap = sorted[0] + 2.0 * PI - sorted[sorted.len() - 1];
    for w in sorted.windows(2) {
        if w[1] - w[0] > gap {
            gap = w[1] - w[0];
            start = w[1];
        }
    }
    let span = (2.0 * PI - gap).max(1e-12);
    let rel = (angle - start).rem_euclid(2.0 * PI);
    if count == 1 {
        return 1.0;
    }
    let width = span / (count as f64 - 1.0);
    let centre = idx as f64 * width;
    let d = (rel - centre) / width;
    if d.abs() >= 1.0 {
        0.0
    } else {
        (0.5 * PI * d).cos().powi(2)
    }
}

/// Both sides of `<gamma d_nu V_t, W> = int rhs W` where `rhs` is the
/// right-hand side of the `V_t` problem.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairingCheck {
    pub boundary: f64,
    pub volume: f64,
    pub rel_diff: f64,
}

/// Boundary pairing of a conormal flux with a gamma-harmonic `W`, checked
/// against the volume side.
pub fn pairing_t<S: Real>(vt_flux: &BoundaryTrace<S>, w: &ScalarField<S>, gamma: &ScalarField<S>, rhs: &ScalarField<S>) -> Result<PairingCheck> {
    check_same(w.grid(), gamma.grid())?;
    check_same(w.grid(), rhs.grid())?;
    let lw = EllipticOperator::new(gamma)?.apply(w)?;
    let grid = w.grid();
    let mut scale = S::zero();
    let op = EllipticOperator::new(gamma)?;
    for i in 0..grid.interior_nodes().len() {
        scale = scale.max(op.abs_apply_at(i, w.values()));
    }
    if lw.max_abs_interior() > S::lit(1e-6) * scale.max(S::min_positive_value()) {
        return Err(Error::InvalidData(format!("W is not gamma-harmonic (residual {:e})", lw.max_abs_interior().f64())));
    }
    let boundary = vt_flux.pair_with(w)?.f64();
    let volume = rhs.inner(w)?.f64();
    let rel_diff = (boundary - volume).abs() / volume.abs().max(boundary.abs()).max(f64::MIN_POSITIVE);
    Ok(PairingCheck { boundary, volume, rel_diff: if boundary == 0.0 && volume == 0.0 { 0.0 } else { rel_diff } })
}

/// `M[i][j] = int weight H_i W_j` with the grid's nodal quadrature.
pub fn linearized_rows<S: Real>(weight: &ScalarField<S>, h_basis: &HarmonicBasis<S>, w_basis: &HarmonicBasis<S>) -> Result<Matrix<S>> {
    check_same(weight.grid(), h_basis.grid())?;
    check_same(weight.grid(), w_basis.grid())?;
    let nw = weight.grid().node_weights();
    let rows: Vec<Vec<S>> = h_basis
        .members
        .par_iter()
        .map(|h| {
            w_basis
                .members
                .iter()
                .map(|w| (0..nw.len()).fold(S::zero(), |acc, n| acc + nw[n] * weight.get(n) * h.get(n) * w.get(n)))
                .collect()
        })
        .collect();
    Ok(Matrix::from_rows(&rows))
}

/// Tensor bilinear hat functions on a coarse lattice over the bounding box.
#[derive(Debug, Clone)]
pub struct CoarseBasis<S> {
    grid: Arc<Grid<S>>,
    shape: [usize; 2],
    lo: [f64; 2],
    step: [f64; 2],
}

impl<S: Real> CoarseBasis<S> {
    /// `n` hats per axis (`n >= 2`).
    pub fn new(grid: &Arc<Grid<S>>, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter("coarse basis needs at least 2 hats per axis".into()));
        }
        let (c, r) = frame(grid);
        let shape = if grid.dim() == 1 { [n, 1] } else { [n, n] };
        let lo = [c[0] - r, if grid.dim() == 1 { 0.0 } else { c[1] - r }];
        let step = [2.0 * r / (n - 1) as f64, if grid.dim() == 1 { 1.0 } else { 2.0 * r / (n - 1) as f64 }];
        Ok(Self { grid: grid.clone(), shape, lo, step })
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1]
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn hat(&self, k: usize, x: [f64; 2]) -> f64 {
        let (i, j) = (k % self.shape[0], k / self.shape[0]);
        let fx = (1.0 - ((x[0] - self.lo[0]) / self.step[0] - i as f64).abs()).max(0.0);
        if self.grid.dim() == 1 {
            return fx;
        }
        let fy = (1.0 - ((x[1] - self.lo[1]) / self.step[1] - j as f64).abs()).max(0.0);
        fx * fy
    }

    pub fn member(&self, k: usize) -> ScalarField<S> {
        ScalarField::from_fn(&self.grid, |x| S::lit(self.hat(k, [x[0].f64(), x[1].f64()])))
    }

    pub fn synthesize(&self, coef: &[S]) -> ScalarField<S> {
        ScalarField::from_fn(&self.grid, |x| {
            let x = [x[0].f64(), x[1].f64()];
            S::lit((0..self.len()).map(|k| coef[k].f64() * self.hat(k, x)).sum::<f64>())
        })
    }

    /// First differences between lattice neighbours; constants are in the
    /// kernel.
    fn difference_penalty(&self) -> Matrix<S> {
        let mut rows = Vec::new();
        let [nx, ny] = self.shape;
        for j in 0..ny {
            for i in 0..nx {
                let k = j * nx + i;
                if i + 1 < nx {
                    let mut r = vec![S::zero(); self.len()];
                    r[k] = -S::one();
                    r[k + 1] = S::one();
                    rows.push(r);
                }
                if j + 1 < ny {
                    let mut r = vec![S::zero(); self.len()];
                    r[k] = -S::one();
                    r[k + nx] = S::one();
                    rows.push(r);
                }
            }
        }
        Matrix::from_rows(&rows).gram()
    }
}

/// Outcome of a regularized recovery.
#[derive(Debug, Clone)]
pub struct Recovery<S> {
    pub field: ScalarField<S>,
    pub coefficients: Vec<S>,
    pub mu: f64,
    pub residual: f64,
    /// `(mu, residual norm, penalty norm)` along the path.
    pub path: Vec<(f64, f64, f64)>,
    /// Singular values of the column-scaled forward map, descending.
    pub singular_values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryDiagnostics {
    pub mu: f64,
    pub residual: f64,
    pub path: Vec<(f64, f64, f64)>,
    pub singular_values: Vec<f64>,
}

impl<S: Real> Recovery<S> {
    pub fn diagnostics(&self) -> RecoveryDiagnostics {
        RecoveryDiagnostics { mu: self.mu, residual: self.residual, path: self.path.clone(), singular_values: self.singular_values.clone() }
    }
}

/// The linear map from coarse coefficients to flattened pairings.
pub fn forward_map<S: Real>(coarse: &CoarseBasis<S>, h_basis: &HarmonicBasis<S>, w_basis: &HarmonicBasis<S>) -> Result<Matrix<S>> {
    let cols: Vec<Vec<S>> = (0..coarse.len())
        .into_par_iter()
        .map(|k| linearized_rows(&coarse.member(k), h_basis, w_basis).map(|m| m.as_slice().to_vec()))
        .collect::<Result<_>>()?;
    let rows = h_basis.len() * w_basis.len();
    let mut a = Matrix::zeros(rows, coarse.len());
    for (k, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            a[(r, k)] = v;
        }
    }
    Ok(a)
}

/// Default regularization grid relative to the scale of the forward map.
pub fn default_mu_grid() -> Vec<f64> {
    (0..=14).map(|i| 10f64.powi(-14 + i)).collect()
}

/// Tikhonov least squares `min |A x - d|^2 + mu |D x|^2` on the coarse
/// representation with `mu` chosen at the L-curve corner.
pub fn recover_field<S: Real>(
    pairings: &Matrix<S>,
    h_basis: &HarmonicBasis<S>,
    w_basis: &HarmonicBasis<S>,
    coarse: &CoarseBasis<S>,
    mu_grid: &[f64],
) -> Result<Recovery<S>> {
    if pairings.rows() != h_basis.len() || pairings.cols() != w_basis.len() {
        return Err(Error::InvalidData(format!(
            "{}x{} pairings for {}x{} basis pairs",
            pairings.rows(),
            pairings.cols(),
            h_basis.len(),
            w_basis.len()
        )));
    }
    if coarse.len() > pairings.rows() * pairings.cols() {
        return Err(Error::InvalidParameter(format!("{} coarse unknowns exceed {} pairings", coarse.len(), pairings.rows() * pairings.cols())));
    }
    let a = forward_map(coarse, h_basis, w_basis)?;
    let d = pairings.as_slice().to_vec();
    solve_regularized(&a, &d, coarse, mu_grid)
}

pub(crate) fn solve_regularized<S: Real>(a: &Matrix<S>, d: &[S], coarse: &CoarseBasis<S>, mu_grid: &[f64]) -> Result<Recovery<S>> {
    if mu_grid.is_empty() {
        return Err(Error::InvalidParameter("empty regularization grid".into()));
    }
    let ata = a.gram();
    let atd = a.tmatvec(d);
    let pen = coarse.difference_penalty();
    let n = coarse.len();
    let tr_a = (0..n).map(|i| ata[(i, i)].f64()).sum::<f64>();
    let tr_p = (0..n).map(|i| pen[(i, i)].f64()).sum::<f64>().max(f64::MIN_POSITIVE);
    let unit = tr_a / tr_p;
    let dnorm = d.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();

    let sv = {
        let scale: Vec<f64> = (0..n).map(|k| ata[(k, k)].f64().sqrt().max(f64::MIN_POSITIVE)).collect();
        let mut scaled = a.clone();
        for r in 0..a.rows() {
            for k in 0..n {
                scaled[(r, k)] = S::lit(a[(r, k)].f64() / scale[k]);
            }
        }
        singular_values(&scaled).into_iter().map(|s| s.f64()).collect::<Vec<_>>()
    };

    let mut path = Vec::with_capacity(mu_grid.len());
    let mut sols = Vec::with_capacity(mu_grid.len());
    for &mu in mu_grid {
        let mut m = ata.clone();
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] += S::lit(mu * unit) * pen[(i, j)];
            }
        }
        let x = match cholesky_solve(&m, &atd) {
            Ok(x) => x,
            Err(_) => continue,
        };
        let ax = a.matvec(&x);
        let res = ax.iter().zip(d).map(|(&p, &q)| (p - q).f64().powi(2)).sum::<f64>().sqrt();
        let px = pen.matvec(&x);
        let semi = x.iter().zip(&px).map(|(&u, &v)| u.f64() * v.f64()).sum::<f64>().max(0.0).sqrt();
        path.push((mu, res, semi));
        sols.push(x);
    }
    if sols.is_empty() {
        return Err(Error::IllConditioned("regularized normal equations singular for every mu".into()));
    }
    let pick = if dnorm == 0.0 { 0 } else { l_curve_corner(&path, dnorm) };
    let coefficients = sols.swap_remove(pick);
    Ok(Recovery {
        field: coarse.synthesize(&coefficients),
        coefficients,
        mu: path[pick].0,
        residual: path[pick].1,
        path,
        singular_values: sv,
    })
}

/// Index of maximum curvature of the L-curve `(log residual, log penalty)`.
/// Falls back to the last `mu` in grid order (the largest, for an ascending
/// grid) with a residual below `1e-6 |d|` when the curve has no corner.
fn l_curve_corner(path: &[(f64, f64, f64)], dnorm: f64) -> usize {
    let floor = 1e-300;
    let pts: Vec<(f64, f64)> = path.iter().map(|&(_, r, s)| (r.max(floor).ln(), s.max(floor).ln())).collect();
    let mut best = None;
    for i in 1..pts.len().saturating_sub(1) {
        let (x0, y0) = pts[i - 1];
        let (x1, y1) = pts[i];
        let (x2, y2) = pts[i + 1];
        let (dx1, dy1, dx2, dy2) = (x1 - x0, y1 - y0, x2 - x1, y2 - y1);
        let cross = dx1 * dy2 - dy1 * dx2;
        let norm = ((dx1 * dx1 + dy1 * dy1) * (dx2 * dx2 + dy2 * dy2) * ((x2 - x0).powi(2) + (y2 - y0).powi(2))).sqrt();
        if norm > 1e-12 {
            let kappa = 2.0 * cross / norm;
            // corner of an L opening up and to the right
            if kappa > 0.0 && best.map(|(_, k)| kappa > k).unwrap_or(true) {
                best = Some((i, kappa));
            }
        }
    }
    match best {
        Some((i, _)) => i,
        None => path.iter().rposition(|&(_, r, _)| r <= 1e-6 * dnorm).unwrap_or(0),
    }
}

/// The `2x2` time-weight system `[w_t(T_i), w_a(T_i)]` of the `q = 1` case.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TwoTimeWeights {
    pub w_t: [f64; 2],
    pub w_a: [f64; 2],
}

impl TwoTimeWeights {
    pub fn determinant(&self) -> f64 {
        self.w_t[0] * self.w_a[1] - self.w_t[1] * self.w_a[0]
    }

    /// Reciprocal condition estimate `|det| / (max row norm)^2`.
    pub fn rcond(&self) -> f64 {
        let r0 = self.w_t[0].hypot(self.w_a[0]);
        let r1 = self.w_t[1].hypot(self.w_a[1]);
        self.determinant().abs() / (r0 * r1).max(f64::MIN_POSITIVE)
    }
}

/// Separated `eps` and `lambda` recoveries.
#[derive(Debug, Clone)]
pub struct Q1Recovery<S> {
    pub eps: Recovery<S>,
    pub lambda: Recovery<S>,
    pub weights: TwoTimeWeights,
}

/// Splits combined pairings `P_i = w_t(T_i) E + w_a(T_i) L` observed at two
/// final times and recovers both fields.
pub fn disambiguate_q1<S: Real>(
    combined: [&Matrix<S>; 2],
    weights: TwoTimeWeights,
    h_basis: &HarmonicBasis<S>,
    w_basis: &HarmonicBasis<S>,
    coarse: &CoarseBasis<S>,
    mu_grid: &[f64],
) -> Result<Q1Recovery<S>> {
    if weights.rcond() < 1e-8 {
        return Err(Error::IllConditioned(format!("two-time weight matrix nearly singular (rcond {:e})", weights.rcond())));
    }
    let (r, c) = (combined[0].rows(), combined[0].cols());
    if combined[1].rows() != r || combined[1].cols() != c {
        return Err(Error::InvalidData("pairing matrices differ in shape".into()));
    }
    let det = weights.determinant();
    let mut e = Matrix::zeros(r, c);
    let mut l = Matrix::zeros(r, c);
    for i in 0..r {
        for j in 0..c {
            let (p0, p1) = (combined[0][(i, j)].f64(), combined[1][(i, j)].f64());
            e[(i, j)] = S::lit((p0 * weights.w_a[1] - p1 * weights.w_a[0]) / det);
            l[(i, j)] = S::lit((weights.w_t[0] * p1 - weights.w_t[1] * p0) / det);
        }
    }
    Ok(Q1Recovery {
        eps: recover_field(&e, h_basis, w_basis, coarse, mu_grid)?,
        lambda: recover_field(&l, h_basis, w_basis, coarse, mu_grid)?,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square(n: usize) -> Arc<Grid<f64>> {
        Arc::new(Grid::unit_square(n).unwrap())
    }

    #[test]
    fn basis_members_are_harmonic_polynomials() {
        let g = square(17);
        let one = ScalarField::constant(&g, 1.0);
        let b = build_basis(&one, 5, false, &SolverOptions { rel_tol: 1e-13, max_iter: None }).unwrap();
        // constant member
        assert!((b.members[0].max() - b.members[0].min()).abs() < 1e-10);
        // Re z^2 = (x-1/2)^2 - (y-1/2)^2 up to normalization; exact for quadratics
        let p = ScalarField::from_fn(&g, |x| (x[0] - 0.5).powi(2) - (x[1] - 0.5).powi(2));
        let s = b.members[3].inner(&p).unwrap() / p.inner(&p).unwrap();
        let diff = b.members[3].sub(&p.scaled(s)).unwrap().max_abs();
        assert!(diff < 1e-9, "{diff}");
        let one_member = build_basis(&one, 1, false, &SolverOptions::default()).unwrap();
        assert_relative_eq!(one_member.members[0].get(100), 1.0, max_relative = 1e-9);
    }

    #[test]
    fn partial_basis_vanishes_on_gamma() {
        let g = Grid::<f64>::unit_square(17).unwrap().with_gamma(|x| x[0] < 1e-9).unwrap();
        let g = Arc::new(g);
        let one = ScalarField::constant(&g, 1.0);
        let b = build_basis(&one, 4, true, &SolverOptions::default()).unwrap();
        for m in &b.members {
            for (&n, &l) in g.boundary_nodes().iter().zip(g.boundary_labels()) {
                if l == BoundaryLabel::Gamma {
                    assert!(m.get(n).abs() <= 1e-10);
                }
            }
        }
        assert!(b.nonnegative.iter().all(|&f| f));
    }

    #[test]
    fn constant_and_zero_recovery() {
        let g = square(13);
        let one = ScalarField::constant(&g, 1.0);
        let b = build_basis(&one, 5, false, &SolverOptions { rel_tol: 1e-13, max_iter: None }).unwrap();
        let coarse = CoarseBasis::new(&g, 4).unwrap();
        let m = linearized_rows(&one, &b, &b).unwrap();
        let r = recover_field(&m, &b, &b, &coarse, &default_mu_grid()).unwrap();
        let err = r.field.sub(&one).unwrap().max_abs();
        assert!(err < 1e-6, "{err}");
        let zero = Matrix::zeros(5, 5);
        let r = recover_field(&zero, &b, &b, &coarse, &default_mu_grid()).unwrap();
        assert!(r.field.max_abs() == 0.0);
        let ez = linearized_rows(&ScalarField::zeros(&g), &b, &b).unwrap();
        assert!(ez.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_time_weights() {
        // w_t = T^3/3, w_a = T^4/12 for alpha = 2, q = 1
        let w = |t: f64| (t.powi(3) / 3.0, crate::special::weighted_power_integral(t, 2.0, 1.0));
        let (a, b) = (w(0.5), w(0.25));
        assert_relative_eq!(a.1, 0.5f64.powi(4) / 12.0, max_relative = 1e-12);
        let tw = TwoTimeWeights { w_t: [a.0, b.0], w_a: [a.1, b.1] };
        let expected = (0.5f64.powi(3) * 0.25f64.powi(4) - 0.25f64.powi(3) * 0.5f64.powi(4)) / 36.0;
        assert_relative_eq!(tw.determinant(), expected, max_relative = 1e-12);
        assert!(tw.determinant() != 0.0);
        let same = TwoTimeWeights { w_t: [a.0, a.0], w_a: [a.1, a.1] };
        assert!(same.rcond() < 1e-12);
    }
}
