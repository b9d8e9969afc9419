//! Dense linear algebra, positive-definite solves and seeded Gaussian sampling.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// First jitter tried when a factorization fails, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter tried, relative to the mean diagonal.
pub const JITTER_MAX: f64 = 1e-4;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for r in 0..self.rows {
            for c in 0..r {
                if (self[(r, c)] - self[(c, r)]).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    /// `(A + Aᵀ)/2`.
    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| 0.5 * (self[(r, c)] + self[(c, r)]))
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.add(&other.scaled(-1.0))
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize without reassociation.
    let n = a.len();
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c ← alpha·op(a)·op(b) + beta·c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and dimensions above describe exactly the buffers of
    // `a`, `b` and `c`, which do not alias (`c` is borrowed mutably).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Lower-triangular Cholesky factor `L` with `A + jitter·I = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
    jitter: f64,
}

impl Cholesky {
    /// Factorizes a symmetric positive definite matrix, retrying with growing
    /// diagonal jitter when the plain factorization breaks down.
    pub fn factor(a: &Matrix) -> Result<Cholesky> {
        if !a.is_square() {
            return Err(Error::invalid(format!("cholesky of non-square {}x{}", a.rows, a.cols)));
        }
        if !a.is_symmetric(1e-8) {
            return Err(Error::invalid("cholesky of asymmetric matrix"));
        }
        let n = a.rows;
        if n == 0 {
            return Ok(Cholesky { l: Matrix::zeros(0, 0), jitter: 0.0 });
        }
        if let Some(l) = try_cholesky(a, 0.0) {
            return Ok(Cholesky { l, jitter: 0.0 });
        }
        let mean_diag = a.trace() / n as f64;
        if !(mean_diag > 0.0) {
            return Err(Error::numerical("cholesky: non-positive mean diagonal"));
        }
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * mean_diag;
            if let Some(l) = try_cholesky(a, jitter) {
                return Ok(Cholesky { l, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::numerical(format!(
            "cholesky failed at maximum jitter {:e} x mean diagonal",
            JITTER_MAX
        )))
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `L·y = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let row = self.l.row(i);
            b[i] = (b[i] - dot(&row[..i], &b[..i])) / row[i];
        }
    }

    /// Solves `Lᵀ·x = y` in place.
    pub fn backward_in_place(&self, y: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let row = self.l.row(i);
            y[i] /= row[i];
            let xi = y[i];
            axpy(-xi, &row[..i], &mut y[..i]);
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_in_place(&mut x);
        self.backward_in_place(&mut x);
        x
    }

    /// Solves `L·Y = B` for all columns of `B`.
    pub fn forward_matrix(&self, b: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(b.rows, n);
        let m = b.cols;
        let mut x = b.clone();
        for i in 0..n {
            let (done, rest) = x.data.split_at_mut(i * m);
            let xi = &mut rest[..m];
            let li = self.l.row(i);
            for k in 0..i {
                let lik = li[k];
                if lik != 0.0 {
                    axpy(-lik, &done[k * m..(k + 1) * m], xi);
                }
            }
            let d = li[i];
            for v in xi.iter_mut() {
                *v /= d;
            }
        }
        x
    }

    /// Solves `Lᵀ·X = Y` for all columns of `Y`.
    pub fn backward_matrix(&self, y: &Matrix) -> Matrix {
        let n = self.dim();
        assert_eq!(y.rows, n);
        let m = y.cols;
        let mut x = y.clone();
        for i in (0..n).rev() {
            let d = self.l[(i, i)];
            for v in x.row_mut(i) {
                *v /= d;
            }
            let (head, tail) = x.data.split_at_mut(i * m);
            let xi = &tail[..m];
            let li = self.l.row(i);
            for k in 0..i {
                let lik = li[k];
                if lik != 0.0 {
                    axpy(-lik, xi, &mut head[k * m..(k + 1) * m]);
                }
            }
        }
        x
    }

    pub fn solve(&self, b: &Matrix) -> Matrix {
        self.backward_matrix(&self.forward_matrix(b))
    }

    /// `(L·Lᵀ)⁻¹`, symmetric.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let linv = self.forward_matrix(&Matrix::identity(n));
        let mut out = Matrix::zeros(n, n);
        gemm(1.0, &linv, true, &linv, false, 0.0, &mut out);
        out.symmetrized()
    }
}

fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                let d = a[(i, i)] + jitter - s;
                if !(d > 0.0) || !d.is_finite() {
                    return None;
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solves `A·X = B` for symmetric positive definite `A`.
pub fn cholesky_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows != a.rows {
        return Err(Error::invalid(format!(
            "right-hand side has {} rows, matrix dimension {}",
            b.rows, a.rows
        )));
    }
    Ok(Cholesky::factor(a)?.solve(b))
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(Error::invalid("eigenvalues of non-square matrix"));
    }
    let n = a.rows;
    let mut m = a.symmetrized();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|r| (0..n).filter(move |&c| c != r).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)] * m[(r, c)])
            .sum();
        let scale: f64 = m.as_slice().iter().map(|v| v * v).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[(k, p)];
                    let akq = m[(k, q)];
                    m[(k, p)] = c * akp - s * akq;
                    m[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[(p, k)];
                    let aqk = m[(q, k)];
                    m[(p, k)] = c * apk - s * aqk;
                    m[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev = m.diagonal();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Multivariate normal with symmetrized covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    mean: Vec<f64>,
    covariance: Matrix,
}

impl Gaussian {
    pub fn new(mean: Vec<f64>, covariance: Matrix) -> Result<Gaussian> {
        let n = mean.len();
        if covariance.rows != n || covariance.cols != n {
            return Err(Error::invalid(format!(
                "covariance {}x{} for mean of length {n}",
                covariance.rows, covariance.cols
            )));
        }
        if mean.iter().chain(covariance.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite gaussian parameters"));
        }
        let covariance = covariance.symmetrized();
        let trace = covariance.trace();
        if n > 0 {
            let min_ev = symmetric_eigenvalues(&covariance)?[0];
            if min_ev < -1e-10 * trace.abs().max(f64::MIN_POSITIVE) {
                return Err(Error::invalid(format!(
                    "covariance not positive semi-definite (min eigenvalue {min_ev:e})"
                )));
            }
        }
        Ok(Gaussian { mean, covariance })
    }

    pub fn point(mean: Vec<f64>) -> Gaussian {
        let n = mean.len();
        Gaussian { mean, covariance: Matrix::zeros(n, n) }
    }

    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Gaussian> {
        Gaussian::new(mean, Matrix::from_diag(variances))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    /// Lower factor `L` with `L·Lᵀ ≈ covariance`; zero for a zero covariance.
    pub fn factor(&self) -> Result<Matrix> {
        if self.covariance.max_abs() == 0.0 {
            return Ok(Matrix::zeros(self.dim(), self.dim()));
        }
        Ok(Cholesky::factor(&self.covariance)?.l)
    }
}

/// Deterministic, splittable random stream.
///
/// Substreams are derived from the stream's key and an index only, never from
/// how many numbers were drawn, so parallel consumers get the same draws
/// regardless of scheduling.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> RngStream {
        let key = splitmix64(seed);
        RngStream { key, rng: ChaCha8Rng::seed_from_u64(key) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn substream(&self, index: u64) -> RngStream {
        let key = splitmix64(self.key ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
        RngStream { key, rng: ChaCha8Rng::seed_from_u64(key) }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + (hi - lo) * u
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniform(0.0, 1.0) * n as f64) as usize).min(n.saturating_sub(1))
    }

    /// `k` distinct indices from `0..n` (partial Fisher-Yates), `k ≤ n`.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let k = k.min(n);
        for i in 0..k {
            let j = i + self.index(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.index(i + 1);
            v.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

/// Draws `n` vectors from `g`.
pub fn sample_mvn(g: &Gaussian, n: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    let l = g.factor()?;
    let d = g.dim();
    Ok((0..n)
        .map(|_| {
            let z = rng.normals(d);
            let mut x = g.mean.clone();
            for r in 0..d {
                x[r] += dot(&l.row(r)[..=r], &z[..=r]);
            }
            x
        })
        .collect())
}

/// Sample mean and (population, `1/n`) covariance of row vectors.
pub fn sample_moments(samples: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
    let n = samples.len();
    let d = samples.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for s in samples {
        axpy(1.0 / n as f64, s, &mut mean);
    }
    let mut cov = Matrix::zeros(d, d);
    for s in samples {
        for r in 0..d {
            let dr = s[r] - mean[r];
            for c in 0..=r {
                cov[(r, c)] += dr * (s[c] - mean[c]) / n as f64;
            }
        }
    }
    for r in 0..d {
        for c in 0..r {
            cov[(c, r)] = cov[(r, c)];
        }
    }
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, rng: &mut RngStream) -> Matrix {
        let m = Matrix::from_vec(n, n, rng.normals(n * n)).unwrap();
        let mut a = m.transpose().matmul(&m);
        a.add_diagonal(1.0);
        a
    }

    /// Gauss-Jordan inverse with partial pivoting.
    fn naive_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = Matrix::zeros(n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                aug[(r, c)] = a[(r, c)];
            }
            aug[(r, n + r)] = 1.0;
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&x, &y| aug[(x, col)].abs().total_cmp(&aug[(y, col)].abs())).unwrap();
            for c in 0..2 * n {
                let t = aug[(col, c)];
                aug[(col, c)] = aug[(piv, c)];
                aug[(piv, c)] = t;
            }
            let p = aug[(col, col)];
            for c in 0..2 * n {
                aug[(col, c)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[(r, col)];
                    for c in 0..2 * n {
                        aug[(r, c)] -= f * aug[(col, c)];
                    }
                }
            }
        }
        Matrix::from_fn(n, n, |r, c| aug[(r, n + c)])
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let mut rng = RngStream::new(1);
        let b = Matrix::from_vec(3, 2, rng.normals(6)).unwrap();
        let x = cholesky_solve(&Matrix::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn scalar_solve() {
        let a = Matrix::from_rows(&[[4.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0]]).unwrap();
        assert_eq!(cholesky_solve(&a, &b).unwrap()[(0, 0)], 0.5);
    }

    #[test]
    fn spd_solve_matches_gauss_jordan() {
        let mut rng = RngStream::new(7);
        for _ in 0..10 {
            let a = random_spd(5, &mut rng);
            let b = Matrix::from_vec(5, 3, rng.normals(15)).unwrap();
            let x = cholesky_solve(&a, &b).unwrap();
            let oracle = naive_inverse(&a).matmul(&b);
            for (u, v) in x.as_slice().iter().zip(oracle.as_slice()) {
                assert!((u - v).abs() <= 1e-6 * (1.0 + v.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn recovers_solution_up_to_dimension_200() {
        let mut rng = RngStream::new(11);
        for n in [1, 10, 57, 200] {
            let a = random_spd(n, &mut rng);
            let x = Matrix::from_vec(n, 2, rng.normals(2 * n)).unwrap();
            let b = a.matmul(&x);
            let got = cholesky_solve(&a, &b).unwrap();
            let err = got.sub(&x).max_abs() / x.max_abs();
            assert!(err < 1e-6, "n={n} err={err}");
        }
    }

    #[test]
    fn residual_is_small() {
        let mut rng = RngStream::new(3);
        let a = random_spd(40, &mut rng);
        let b = Matrix::from_vec(40, 1, rng.normals(40)).unwrap();
        let x = cholesky_solve(&a, &b).unwrap();
        let r = a.matmul(&x).sub(&b);
        assert!(r.max_abs() <= 1e-8 * b.max_abs());
    }

    #[test]
    fn rejects_bad_inputs() {
        let rect = Matrix::zeros(2, 3);
        assert!(matches!(cholesky_solve(&rect, &Matrix::zeros(2, 1)), Err(Error::InvalidInput(_))));
        let asym = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_solve(&asym, &Matrix::zeros(2, 1)), Err(Error::InvalidInput(_))));
        let indef = Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]]).unwrap();
        assert!(matches!(
            cholesky_solve(&indef, &Matrix::zeros(2, 1)),
            Err(Error::NumericalFailure(_))
        ));
    }

    #[test]
    fn jitter_rescues_singular_gram() {
        // rank one
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let c = Cholesky::factor(&a).unwrap();
        assert!(c.jitter() > 0.0 && c.jitter() <= JITTER_MAX);
    }

    #[test]
    fn inverse_and_triangular_solves_agree() {
        let mut rng = RngStream::new(5);
        let a = random_spd(30, &mut rng);
        let c = Cholesky::factor(&a).unwrap();
        let inv = c.inverse();
        let prod = a.matmul(&inv);
        assert!(prod.sub(&Matrix::identity(30)).max_abs() < 1e-9);
        let b = rng.normals(30);
        let x1 = c.solve_vec(&b);
        let x2 = inv.matvec(&b);
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_gaussian_samples_are_the_mean() {
        let g = Gaussian::point(vec![1.0, -2.0]);
        let mut rng = RngStream::new(0);
        for s in sample_mvn(&g, 10, &mut rng).unwrap() {
            assert_eq!(s, vec![1.0, -2.0]);
        }
    }

    #[test]
    fn univariate_moments() {
        let g = Gaussian::diagonal(vec![0.0], &[1.0]).unwrap();
        let mut rng = RngStream::new(42);
        let s = sample_mvn(&g, 100_000, &mut rng).unwrap();
        let (m, c) = sample_moments(&s);
        assert!(m[0].abs() < 0.02);
        assert!((c[(0, 0)] - 1.0).abs() < 0.03);
    }

    #[test]
    fn bivariate_moments() {
        let cov = Matrix::from_rows(&[[1.0, 0.5], [0.5, 1.0]]).unwrap();
        let g = Gaussian::new(vec![0.0, 0.0], cov.clone()).unwrap();
        let mut rng = RngStream::new(43);
        let s = sample_mvn(&g, 100_000, &mut rng).unwrap();
        let (_, c) = sample_moments(&s);
        assert!(c.sub(&cov).max_abs() < 0.02, "{c:?}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let g = Gaussian::diagonal(vec![0.0, 1.0], &[2.0, 0.5]).unwrap();
        let a = sample_mvn(&g, 5, &mut RngStream::new(9)).unwrap();
        let b = sample_mvn(&g, 5, &mut RngStream::new(9)).unwrap();
        assert_eq!(a, b);
        let c = sample_mvn(&g, 5, &mut RngStream::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn substreams_are_independent_of_draw_count() {
        let mut a = RngStream::new(3);
        let b = RngStream::new(3);
        a.normals(17);
        assert_eq!(a.substream(4).normals(3), b.substream(4).normals(3));
        assert_ne!(b.substream(4).normals(3), b.substream(5).normals(3));
    }

    #[test]
    fn gaussian_symmetrizes_and_rejects_indefinite() {
        let cov = Matrix::from_rows(&[[1.0, 0.3], [0.1, 1.0]]).unwrap();
        let g = Gaussian::new(vec![0.0, 0.0], cov).unwrap();
        assert_eq!(g.covariance()[(0, 1)], g.covariance()[(1, 0)]);
        assert!((g.covariance()[(0, 1)] - 0.2).abs() < 1e-15);
        let bad = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(Gaussian::new(vec![0.0, 0.0], bad).is_err());
    }

    #[test]
    fn jacobi_eigenvalues() {
        let a = Matrix::from_rows(&[[2.0, 1.0], [1.0, 2.0]]).unwrap();
        let ev = symmetric_eigenvalues(&a).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }
}
