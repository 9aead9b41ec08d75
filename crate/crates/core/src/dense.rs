//! Small dense linear algebra used by the fits and the recovery step.

use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut m = Self::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), cols, "ragged rows");
            m.data[i * cols..(i + 1) * cols].copy_from_slice(r);
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == S::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(self.cols, x.len());
        (0..self.rows).map(|i| self.row(i).iter().zip(x).fold(S::zero(), |acc, (&a, &b)| acc + a * b)).collect()
    }

    /// `A^T A`.
    pub fn gram(&self) -> Self {
        let mut g = Self::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                let a = row[i];
                for j in i..self.cols {
                    g.data[i * self.cols + j] += a * row[j];
                }
            }
        }
        for i in 0..self.cols {
            for j in 0..i {
                g.data[i * self.cols + j] = g.data[j * self.cols + i];
            }
        }
        g
    }

    /// `A^T y`.
    pub fn tmatvec(&self, y: &[S]) -> Vec<S> {
        assert_eq!(self.rows, y.len());
        let mut out = vec![S::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    pub fn frobenius(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt()
    }
}

impl<S> std::ops::Index<(usize, usize)> for Matrix<S> {
    type Output = S;
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S> std::ops::IndexMut<(usize, usize)> for Matrix<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn cholesky_solve<S: Real>(a: &Matrix<S>, b: &[S]) -> Result<Vec<S>> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > S::zero()) {
            return Err(Error::IllConditioned(format!("matrix not positive definite at pivot {j}")));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let v = l[(i, k)] * y[k];
            y[i] -= v;
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let v = l[(k, i)] * y[k];
            y[i] -= v;
        }
        y[i] /= l[(i, i)];
    }
    Ok(y)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<S: Real>(a: &Matrix<S>) -> Vec<S> {
    let n = a.rows();
    let mut m = a.clone();
    let tol = S::epsilon() * m.frobenius().max(S::min_positive_value());
    for _sweep in 0..100 {
        let mut off = S::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= S::min_positive_value() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = (t * t + S::one()).sqrt().recip();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<S> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    ev
}

/// Singular values of `A`, descending.
pub fn singular_values<S: Real>(a: &Matrix<S>) -> Vec<S> {
    let mut sv: Vec<S> = symmetric_eigenvalues(&a.gram()).into_iter().map(|l| l.max(S::zero()).sqrt()).collect();
    sv.reverse();
    sv
}

/// Ordinary least squares fit with coefficient covariance.
#[derive(Debug, Clone)]
pub struct LeastSquares<S> {
    pub coef: Vec<S>,
    /// `sigma^2 (X^T X)^{-1}` with `sigma^2 = RSS / (n - p)`.
    pub covariance: Matrix<S>,
    pub residuals: Vec<S>,
    pub rss: S,
    /// Ratio of extreme singular values of the column-scaled design.
    pub condition: S,
}

impl<S: Real> LeastSquares<S> {
    pub fn std_err(&self, k: usize) -> S {
        self.covariance[(k, k)].max(S::zero()).sqrt()
    }
}

/// Fits `y ~ X b` by Householder QR.
pub fn least_squares<S: Real>(x: &Matrix<S>, y: &[S]) -> Result<LeastSquares<S>> {
    let n = x.rows();
    let p = x.cols();
    if n < p || p == 0 {
        return Err(Error::IllConditioned(format!("{n} observations for {p} parameters")));
    }
    // column scaling keeps the condition estimate meaningful
    let scale: Vec<S> = (0..p)
        .map(|j| {
            let s = (0..n).fold(S::zero(), |acc, i| acc + x[(i, j)] * x[(i, j)]).sqrt();
            if s > S::zero() {
                s
            } else {
                S::one()
            }
        })
        .collect();
    let mut r = Matrix::zeros(n, p);
    for i in 0..n {
        for j in 0..p {
            r[(i, j)] = x[(i, j)] / scale[j];
        }
    }
    let sv = singular_values(&r);
    let condition = if sv[p - 1] > S::zero() { sv[0] / sv[p - 1] } else { S::infinity() };
    let mut qty = y.to_vec();
    for k in 0..p {
        let norm = (k..n).fold(S::zero(), |acc, i| acc + r[(i, k)] * r[(i, k)]).sqrt();
        if norm == S::zero() {
            return Err(Error::IllConditioned(format!("design column {k} is zero")));
        }
        let alpha = if r[(k, k)] > S::zero() { -norm } else { norm };
        let mut v: Vec<S> = (k..n).map(|i| r[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2 = v.iter().fold(S::zero(), |acc, &a| acc + a * a);
        if vnorm2 == S::zero() {
            continue;
        }
        for j in k..p {
            let d = (k..n).fold(S::zero(), |acc, i| acc + v[i - k] * r[(i, j)]);
            let f = S::lit(2.0) * d / vnorm2;
            for i in k..n {
                r[(i, j)] -= f * v[i - k];
            }
        }
        let d = (k..n).fold(S::zero(), |acc, i| acc + v[i - k] * qty[i]);
        let f = S::lit(2.0) * d / vnorm2;
        for i in k..n {
            qty[i] -= f * v[i - k];
        }
    }
    let mut coef = vec![S::zero(); p];
    for i in (0..p).rev() {
        let mut s = qty[i];
        for j in i + 1..p {
            s -= r[(i, j)] * coef[j];
        }
        if r[(i, i)] == S::zero() {
            return Err(Error::IllConditioned("singular design".into()));
        }
        coef[i] = s / r[(i, i)];
    }
    // (R^T R)^{-1} in scaled variables
    let mut rinv = Matrix::zeros(p, p);
    for j in 0..p {
        rinv[(j, j)] = r[(j, j)].recip();
        for i in (0..j).rev() {
            let mut s = S::zero();
            for k in i + 1..=j {
                s += r[(i, k)] * rinv[(k, j)];
            }
            rinv[(i, j)] = -s / r[(i, i)];
        }
    }
    let xtx_inv = rinv.matmul(&rinv.transpose());
    for (c, s) in coef.iter_mut().zip(&scale) {
        *c /= *s;
    }
    let fitted = x.matvec(&coef);
    let residuals: Vec<S> = y.iter().zip(&fitted).map(|(&a, &b)| a - b).collect();
    let rss = residuals.iter().fold(S::zero(), |acc, &e| acc + e * e);
    let dof = n - p;
    let sigma2 = if dof > 0 { rss / S::from_usize_lossy(dof) } else { S::zero() };
    let mut covariance = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            covariance[(i, j)] = sigma2 * xtx_inv[(i, j)] / (scale[i] * scale[j]);
        }
    }
    Ok(LeastSquares { coef, covariance, residuals, rss, condition })
}

/// Two-sided Student-t quantile for a `level` confidence interval.
pub fn t_quantile(level: f64, dof: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let q = 0.5 + 0.5 * level;
    match StudentsT::new(0.0, 1.0, dof.max(1) as f64) {
        Ok(t) => t.inverse_cdf(q),
        Err(_) => f64::INFINITY,
    }
}

/// Slope of `ln y` against `ln x` (points with non-positive `y` are skipped).
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x.iter().zip(y).filter(|(&a, &b)| a > 0.0 && b > 0.0).map(|(&a, &b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_and_eigen() {
        let a: Matrix<f64> = Matrix::from_rows(&[vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 2.0]]);
        let x = cholesky_solve(&a, &[1.0, 2.0, 3.0]).unwrap();
        let back = a.matvec(&x);
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((b - e).abs() < 1e-12);
        }
        let ev = symmetric_eigenvalues(&a);
        let trace: f64 = ev.iter().sum();
        assert!((trace - 9.0).abs() < 1e-12);
        assert!(ev.iter().all(|&l| l > 0.0));
        let ev = symmetric_eigenvalues::<f64>(&Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]));
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn exact_line_fit() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let x = Matrix::from_rows(&xs.iter().map(|&t| vec![1.0, t]).collect::<Vec<_>>());
        let y: Vec<f64> = xs.iter().map(|t| 2.0 - 0.5 * t).collect();
        let fit = least_squares(&x, &y).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-12);
        assert!((fit.coef[1] + 0.5).abs() < 1e-12);
        assert!(fit.rss < 1e-24);
    }

    #[test]
    fn noisy_fit_covariance_matches_textbook() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 2.9, 5.2, 6.8];
        let x: Matrix<f64> = Matrix::from_rows(&xs.iter().map(|&t| vec![1.0, t]).collect::<Vec<_>>());
        let fit = least_squares(&x, &y).unwrap();
        // slope variance sigma^2 / Sxx with Sxx = 5
        let sigma2 = fit.rss / 2.0;
        assert!((fit.covariance[(1, 1)] - sigma2 / 5.0).abs() < 1e-12);
        assert!(t_quantile(0.95, 2) > 4.3 && t_quantile(0.95, 2) < 4.31);
    }
}
