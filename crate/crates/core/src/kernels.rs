//! Covariance functions.
//!
//! Stationary kernels use one lengthscale per input dimension. The
//! input-dependent variant gives every point its own lengthscales, family
//! weights, signal variance and noise ([`LocalParams`]) and combines two
//! points with the Gibbs construction
//!
//! ```text
//! k_f(xᵢ, xⱼ) = Π_d √(2 ℓᵢ ℓⱼ / (ℓᵢ² + ℓⱼ²)) · κ_f(r),   r² = Σ_d (xᵢ - xⱼ)² / ((ℓᵢ² + ℓⱼ²) / 2)
//! ```
//!
//! which stays positive semi-definite for any positive lengthscale field.
//! Families are mixed with geometric-mean weights `√(w_f(xᵢ) w_f(xⱼ))` and the
//! sum is scaled by `√(sᵢ sⱼ)`.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    SE,
    Matern12,
    Matern32,
    Matern52,
    RQ,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 5] = [
        KernelFamily::SE,
        KernelFamily::Matern12,
        KernelFamily::Matern32,
        KernelFamily::Matern52,
        KernelFamily::RQ,
    ];

    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    /// Correlation as a function of the squared scaled distance `u = r²`.
    #[inline]
    pub fn eval_sq(self, u: f64, rq_alpha: f64) -> f64 {
        match self {
            KernelFamily::SE => (-0.5 * u).exp(),
            KernelFamily::Matern12 => (-u.sqrt()).exp(),
            KernelFamily::Matern32 => {
                let a = (3.0 * u).sqrt();
                (1.0 + a) * (-a).exp()
            }
            KernelFamily::Matern52 => {
                let a = (5.0 * u).sqrt();
                (1.0 + a + 5.0 * u / 3.0) * (-a).exp()
            }
            KernelFamily::RQ => (1.0 + u / (2.0 * rq_alpha)).powf(-rq_alpha),
        }
    }

    /// `(κ, dκ/du)`. The Matérn-1/2 derivative is singular at `u = 0`, where
    /// every `u`-dependent partial vanishes anyway; zero is returned there.
    #[inline]
    pub fn eval_sq_with_derivative(self, u: f64, rq_alpha: f64) -> (f64, f64) {
        match self {
            KernelFamily::SE => {
                let e = (-0.5 * u).exp();
                (e, -0.5 * e)
            }
            KernelFamily::Matern12 => {
                let r = u.sqrt();
                let e = (-r).exp();
                (e, if r > 0.0 { -0.5 * e / r } else { 0.0 })
            }
            KernelFamily::Matern32 => {
                let a = (3.0 * u).sqrt();
                let e = (-a).exp();
                ((1.0 + a) * e, -1.5 * e)
            }
            KernelFamily::Matern52 => {
                let a = (5.0 * u).sqrt();
                let e = (-a).exp();
                ((1.0 + a + 5.0 * u / 3.0) * e, -(5.0 / 6.0) * (1.0 + a) * e)
            }
            KernelFamily::RQ => {
                let base = 1.0 + u / (2.0 * rq_alpha);
                let v = base.powf(-rq_alpha);
                (v, -0.5 * v / base)
            }
        }
    }

    /// `∂κ/∂α` for the rational quadratic family, zero otherwise.
    #[inline]
    pub fn d_alpha(self, u: f64, rq_alpha: f64) -> f64 {
        match self {
            KernelFamily::RQ => {
                let z = u / (2.0 * rq_alpha);
                let v = (1.0 + z).powf(-rq_alpha);
                v * (-z.ln_1p() + z / (1.0 + z))
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryParams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub rq_alpha: f64,
    pub noise_variance: f64,
}

impl StationaryParams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Self {
        StationaryParams { lengthscales, signal_variance, rq_alpha: 1.0, noise_variance }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("lengthscales must be positive"));
        }
        if !(self.signal_variance > 0.0) || !(self.rq_alpha > 0.0) || !(self.noise_variance >= 0.0) {
            return Err(Error::invalid(format!("invalid stationary params {self:?}")));
        }
        Ok(())
    }
}

/// Per-point kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalParams {
    /// `lengthscales[family][dim]`.
    pub lengthscales: Vec<Vec<f64>>,
    pub noise_variance: f64,
    pub mixture_weights: Vec<f64>,
    pub signal_variance: f64,
}

impl LocalParams {
    /// The same lengthscales for every family, weights one-hot on `family`.
    pub fn single_family(family: KernelFamily, lengthscales: &[f64], signal: f64, noise: f64) -> Self {
        let mut w = vec![0.0; KernelFamily::COUNT];
        w[family.index()] = 1.0;
        LocalParams {
            lengthscales: vec![lengthscales.to_vec(); KernelFamily::COUNT],
            noise_variance: noise,
            mixture_weights: w,
            signal_variance: signal,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.lengthscales.len() != KernelFamily::COUNT
            || self.lengthscales.iter().any(|l| l.len() != dim)
            || self.mixture_weights.len() != KernelFamily::COUNT
        {
            return Err(Error::invalid("local params have the wrong shape"));
        }
        if self.lengthscales.iter().flatten().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(Error::invalid("local lengthscales must be positive"));
        }
        let wsum: f64 = self.mixture_weights.iter().sum();
        if self.mixture_weights.iter().any(|w| !(*w >= 0.0)) || (wsum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights must sum to 1, got {wsum}")));
        }
        if !(self.signal_variance > 0.0) || !(self.noise_variance >= 0.0) {
            return Err(Error::invalid("signal variance must be positive, noise nonnegative"));
        }
        Ok(())
    }
}

/// `‖(xᵢ - xⱼ) / ℓ‖`.
pub fn scaled_distance(xi: &[f64], xj: &[f64], lengthscales: &[f64]) -> Result<f64> {
    if xi.len() != xj.len() || xi.len() != lengthscales.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} / {} / {}",
            xi.len(),
            xj.len(),
            lengthscales.len()
        )));
    }
    if lengthscales.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::invalid("lengthscales must be positive"));
    }
    Ok(xi
        .iter()
        .zip(xj)
        .zip(lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum::<f64>()
        .sqrt())
}

pub fn kernel_value(family: KernelFamily, r: f64, rq_alpha: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::invalid(format!("negative distance {r}")));
    }
    if family == KernelFamily::RQ && !(rq_alpha > 0.0) {
        return Err(Error::invalid("rq_alpha must be positive"));
    }
    Ok(family.eval_sq(r * r, rq_alpha))
}

pub fn stationary_value(family: KernelFamily, xi: &[f64], xj: &[f64], p: &StationaryParams) -> Result<f64> {
    let r = scaled_distance(xi, xj, &p.lengthscales)?;
    Ok(p.signal_variance * kernel_value(family, r, p.rq_alpha)?)
}

/// Gibbs-form value of one family (unit signal variance, no weights).
pub fn nonstationary_value(
    family: KernelFamily,
    xi: &[f64],
    xj: &[f64],
    pi: &LocalParams,
    pj: &LocalParams,
    rq_alpha: f64,
) -> Result<f64> {
    let f = family.index();
    let (li, lj) = (&pi.lengthscales[f], &pj.lengthscales[f]);
    if xi.len() != xj.len() || li.len() != xi.len() || lj.len() != xi.len() {
        return Err(Error::invalid("dimension mismatch"));
    }
    if li.iter().chain(lj).any(|l| !(*l > 0.0)) {
        return Err(Error::invalid("lengthscales must be positive"));
    }
    let mut prefactor = 1.0;
    let mut u = 0.0;
    for d in 0..xi.len() {
        let s = 0.5 * (li[d] * li[d] + lj[d] * lj[d]);
        prefactor *= (li[d] * lj[d] / s).sqrt();
        u += (xi[d] - xj[d]).powi(2) / s;
    }
    Ok(prefactor * family.eval_sq(u, rq_alpha))
}

pub fn mixture_value(xi: &[f64], xj: &[f64], pi: &LocalParams, pj: &LocalParams, rq_alpha: f64) -> Result<f64> {
    let mut sum = 0.0;
    for fam in KernelFamily::ALL {
        let w = (pi.mixture_weights[fam.index()] * pj.mixture_weights[fam.index()]).sqrt();
        if w > 0.0 {
            sum += w * nonstationary_value(fam, xi, xj, pi, pj, rq_alpha)?;
        }
    }
    Ok((pi.signal_variance * pj.signal_variance).sqrt() * sum)
}

/// Kernel specification for Gram assembly.
pub enum GramParams<'a> {
    Stationary { family: KernelFamily, params: &'a StationaryParams },
    /// Per-point parameters for the rows (`x`) and columns (`x2`).
    Local { rows: &'a [LocalParams], cols: &'a [LocalParams], rq_alpha: f64 },
}

/// `K(x, x2)`; with `x2 = None` the training Gram `K(x, x)` including noise on
/// the diagonal (per point for local parameters).
pub fn gram(x: &Matrix, x2: Option<&Matrix>, params: &GramParams<'_>) -> Result<Matrix> {
    let cols = x2.unwrap_or(x);
    if x.cols() != cols.cols() {
        return Err(Error::invalid("gram inputs have different dimensions"));
    }
    let (n, m) = (x.rows(), cols.rows());
    let mut k = Matrix::zeros(n, m);
    match params {
        GramParams::Stationary { family, params } => {
            params.validate()?;
            if params.lengthscales.len() != x.cols() {
                return Err(Error::invalid("lengthscale count does not match input dimension"));
            }
            for i in 0..n {
                for j in 0..m {
                    if x2.is_none() && j < i {
                        k[(i, j)] = k[(j, i)];
                        continue;
                    }
                    k[(i, j)] = stationary_value(*family, x.row(i), cols.row(j), params)?;
                }
            }
            if x2.is_none() {
                k.add_diagonal(params.noise_variance);
            }
        }
        GramParams::Local { rows, cols: col_params, rq_alpha } => {
            let col_params = if x2.is_none() { *rows } else { *col_params };
            if rows.len() != n || col_params.len() != m {
                return Err(Error::invalid("one LocalParams per point required"));
            }
            for p in rows.iter().chain(col_params.iter()) {
                p.validate(x.cols())?;
            }
            let a = LocalSet::new(rows, x.cols());
            let b = if x2.is_none() { None } else { Some(LocalSet::new(col_params, x.cols())) };
            let b = b.as_ref().unwrap_or(&a);
            for i in 0..n {
                for j in 0..m {
                    if x2.is_none() && j < i {
                        k[(i, j)] = k[(j, i)];
                        continue;
                    }
                    k[(i, j)] = a.value(i, x.row(i), b, j, cols.row(j), *rq_alpha);
                }
                if x2.is_none() {
                    k[(i, i)] += rows[i].noise_variance;
                }
            }
        }
    }
    Ok(k)
}

/// Precomputed per-point quantities for fast local-kernel evaluation.
#[derive(Debug, Clone)]
pub struct LocalSet {
    dim: usize,
    /// `[point][family][dim]` squared lengthscales.
    ls2: Vec<f64>,
    /// `[point][family]` product of lengthscales over dimensions.
    prod: Vec<f64>,
    /// `[point][family]` square-root mixture weights.
    sqrt_w: Vec<f64>,
    sqrt_s: Vec<f64>,
}

/// Layout of the partials written by [`LocalSet::value_and_grad_first`].
#[derive(Debug, Clone, Copy)]
pub struct LocalGradLayout {
    pub dim: usize,
}

impl LocalGradLayout {
    pub fn len(self) -> usize {
        self.dim + KernelFamily::COUNT * self.dim + KernelFamily::COUNT + 2
    }
    pub fn is_empty(self) -> bool {
        false
    }
    /// Offset of `∂/∂x_d`.
    pub fn x(self) -> usize {
        0
    }
    /// Offset of `∂/∂ln ℓ[family][d]`.
    pub fn log_ls(self) -> usize {
        self.dim
    }
    /// Offset of `∂/∂ln w[family]`.
    pub fn log_w(self) -> usize {
        self.dim + KernelFamily::COUNT * self.dim
    }
    /// Offset of `∂/∂ln s`.
    pub fn log_s(self) -> usize {
        self.log_w() + KernelFamily::COUNT
    }
    /// Offset of `∂/∂α` (rational quadratic).
    pub fn alpha(self) -> usize {
        self.log_s() + 1
    }
}

impl LocalSet {
    pub fn new(params: &[LocalParams], dim: usize) -> LocalSet {
        let f = KernelFamily::COUNT;
        let n = params.len();
        let mut set = LocalSet {
            dim,
            ls2: Vec::with_capacity(n * f * dim),
            prod: Vec::with_capacity(n * f),
            sqrt_w: Vec::with_capacity(n * f),
            sqrt_s: Vec::with_capacity(n),
        };
        for p in params {
            set.push(p);
        }
        set
    }

    pub fn push(&mut self, p: &LocalParams) {
        for fam in 0..KernelFamily::COUNT {
            let ls = &p.lengthscales[fam];
            self.ls2.extend(ls.iter().map(|l| l * l));
            self.prod.push(ls.iter().product());
            self.sqrt_w.push(p.mixture_weights[fam].sqrt());
        }
        self.sqrt_s.push(p.signal_variance.sqrt());
    }

    pub fn len(&self) -> usize {
        self.sqrt_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sqrt_s.is_empty()
    }

    pub fn grad_layout(&self) -> LocalGradLayout {
        LocalGradLayout { dim: self.dim }
    }

    /// Mixture value between point `i` of `self` and point `j` of `other`.
    #[inline]
    pub fn value(&self, i: usize, xi: &[f64], other: &LocalSet, j: usize, xj: &[f64], rq_alpha: f64) -> f64 {
        let d = self.dim;
        let f = KernelFamily::COUNT;
        let mut sum = 0.0;
        for (fi, fam) in KernelFamily::ALL.iter().enumerate() {
            let cw = self.sqrt_w[i * f + fi] * other.sqrt_w[j * f + fi];
            if cw == 0.0 {
                continue;
            }
            let a = &self.ls2[(i * f + fi) * d..(i * f + fi + 1) * d];
            let b = &other.ls2[(j * f + fi) * d..(j * f + fi + 1) * d];
            let mut u = 0.0;
            let mut prod_inv = 1.0;
            for k in 0..d {
                let inv = 2.0 / (a[k] + b[k]);
                let delta = xi[k] - xj[k];
                u += delta * delta * inv;
                prod_inv *= inv;
            }
            let pref = (self.prod[i * f + fi] * other.prod[j * f + fi] * prod_inv).sqrt();
            sum += cw * pref * fam.eval_sq(u, rq_alpha);
        }
        self.sqrt_s[i] * other.sqrt_s[j] * sum
    }

    /// Value and partials with respect to the first point's input and
    /// log-parameters (layout [`LocalGradLayout`]); `grad` is overwritten.
    pub fn value_and_grad_first(
        &self,
        i: usize,
        xi: &[f64],
        other: &LocalSet,
        j: usize,
        xj: &[f64],
        rq_alpha: f64,
        grad: &mut [f64],
    ) -> f64 {
        self.value_and_grad_impl::<true>(i, xi, other, j, xj, rq_alpha, grad)
    }

    /// As [`LocalSet::value_and_grad_first`] with the `α` partial left at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn value_and_grad_first_fixed_alpha(
        &self,
        i: usize,
        xi: &[f64],
        other: &LocalSet,
        j: usize,
        xj: &[f64],
        rq_alpha: f64,
        grad: &mut [f64],
    ) -> f64 {
        self.value_and_grad_impl::<false>(i, xi, other, j, xj, rq_alpha, grad)
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn value_and_grad_impl<const ALPHA: bool>(
        &self,
        i: usize,
        xi: &[f64],
        other: &LocalSet,
        j: usize,
        xj: &[f64],
        rq_alpha: f64,
        grad: &mut [f64],
    ) -> f64 {
        let d = self.dim;
        let f = KernelFamily::COUNT;
        let lay = self.grad_layout();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let base = self.sqrt_s[i] * other.sqrt_s[j];
        let mut sum = 0.0;
        let mut dalpha = 0.0;
        let mut stack = [(0.0, 0.0, 0.0); 16];
        let mut heap = Vec::new();
        let scratch: &mut [(f64, f64, f64)] = if d <= stack.len() {
            &mut stack[..d]
        } else {
            heap.resize(d, (0.0, 0.0, 0.0));
            &mut heap
        };
        for (fi, fam) in KernelFamily::ALL.iter().enumerate() {
            let cw = self.sqrt_w[i * f + fi] * other.sqrt_w[j * f + fi];
            if cw == 0.0 {
                continue;
            }
            let a = &self.ls2[(i * f + fi) * d..(i * f + fi + 1) * d];
            let b = &other.ls2[(j * f + fi) * d..(j * f + fi + 1) * d];
            let mut u = 0.0;
            let mut prod_inv = 1.0;
            for k in 0..d {
                let inv = 2.0 / (a[k] + b[k]);
                let delta = xi[k] - xj[k];
                let dd = delta * delta * inv;
                scratch[k] = (inv, delta, dd);
                u += dd;
                prod_inv *= inv;
            }
            let pref = (self.prod[i * f + fi] * other.prod[j * f + fi] * prod_inv).sqrt();
            let (kv, dk) = fam.eval_sq_with_derivative(u, rq_alpha);
            let t = cw * pref * kv;
            let tu = cw * pref * dk;
            sum += t;
            let ls_off = lay.log_ls() + fi * d;
            let (bt, btu) = (base * t, base * tu);
            for k in 0..d {
                let (inv, delta, dd) = scratch[k];
                let ratio = a[k] * inv;
                grad[ls_off + k] = 0.5 * bt * (1.0 - ratio) - btu * dd * ratio;
                grad[lay.x() + k] += 2.0 * btu * delta * inv;
            }
            grad[lay.log_w() + fi] = 0.5 * base * t;
            if ALPHA && *fam == KernelFamily::RQ {
                dalpha = base * cw * pref * fam.d_alpha(u, rq_alpha);
            }
        }
        let k = base * sum;
        grad[lay.log_s()] = 0.5 * k;
        grad[lay.alpha()] = dalpha;
        k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{symmetric_eigenvalues, RngStream};

    fn random_local(dim: usize, rng: &mut RngStream) -> LocalParams {
        let mut w: Vec<f64> = (0..5).map(|_| rng.uniform(0.0, 1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        LocalParams {
            lengthscales: (0..5).map(|_| (0..dim).map(|_| rng.uniform(0.1, 10.0)).collect()).collect(),
            noise_variance: rng.uniform(0.0, 0.1),
            mixture_weights: w,
            signal_variance: rng.uniform(0.5, 2.0),
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(scaled_distance(&[1.0, 2.0], &[1.0, 2.0], &[0.3, 5.0]).unwrap(), 0.0);
        let e = scaled_distance(&[3.0, 0.0], &[0.0, 4.0], &[1.0, 1.0]).unwrap();
        assert!((e - 5.0).abs() < 1e-15);
        let r = scaled_distance(&[1.0, 0.0], &[0.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-15);
        assert!(scaled_distance(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn kernel_value_examples() {
        for fam in KernelFamily::ALL {
            assert_eq!(kernel_value(fam, 0.0, 1.3).unwrap(), 1.0);
        }
        assert!((kernel_value(KernelFamily::SE, 2.0, 1.0).unwrap() - 0.135_335_283_236_612_7).abs() < 1e-12);
        assert!((kernel_value(KernelFamily::Matern12, 1.0, 1.0).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-12);
        assert!(kernel_value(KernelFamily::SE, -1.0, 1.0).is_err());
        // closed forms
        let r: f64 = 0.7;
        let m32 = (1.0 + 3f64.sqrt() * r) * (-3f64.sqrt() * r).exp();
        let m52 = (1.0 + 5f64.sqrt() * r + 5.0 * r * r / 3.0) * (-5f64.sqrt() * r).exp();
        let rq = (1.0 + r * r / (2.0 * 0.8)).powf(-0.8);
        assert!((kernel_value(KernelFamily::Matern32, r, 1.0).unwrap() - m32).abs() < 1e-15);
        assert!((kernel_value(KernelFamily::Matern52, r, 1.0).unwrap() - m52).abs() < 1e-15);
        assert!((kernel_value(KernelFamily::RQ, r, 0.8).unwrap() - rq).abs() < 1e-15);
    }

    #[test]
    fn stationary_bounds() {
        let mut rng = RngStream::new(2);
        let p = StationaryParams { lengthscales: vec![0.5, 2.0], signal_variance: 1.7, rq_alpha: 0.6, noise_variance: 0.0 };
        for fam in KernelFamily::ALL {
            for _ in 0..50 {
                let a = rng.normals(2);
                let b = rng.normals(2);
                let kab = stationary_value(fam, &a, &b, &p).unwrap();
                assert!(kab.abs() <= p.signal_variance + 1e-15);
                assert_eq!(stationary_value(fam, &a, &a, &p).unwrap(), p.signal_variance);
            }
        }
    }

    #[test]
    fn nonstationary_reduces_to_stationary() {
        let mut rng = RngStream::new(3);
        let ls = [0.7, 1.9, 0.3];
        for fam in KernelFamily::ALL {
            let p = LocalParams::single_family(fam, &ls, 1.0, 0.0);
            for _ in 0..20 {
                let a = rng.normals(3);
                let b = rng.normals(3);
                let ns = nonstationary_value(fam, &a, &b, &p, &p, 0.9).unwrap();
                let r = scaled_distance(&a, &b, &ls).unwrap();
                let st = kernel_value(fam, r, 0.9).unwrap();
                assert!((ns - st).abs() <= 1e-12, "{fam:?}: {ns} vs {st}");
            }
        }
    }

    #[test]
    fn diagonal_prefactor_bound() {
        let mut rng = RngStream::new(4);
        for _ in 0..20 {
            let pi = random_local(3, &mut rng);
            let pj = random_local(3, &mut rng);
            let x = rng.normals(3);
            for fam in KernelFamily::ALL {
                let v = nonstationary_value(fam, &x, &x, &pi, &pj, 1.0).unwrap();
                let f = fam.index();
                let pref: f64 = (0..3)
                    .map(|d| {
                        let (a, b) = (pi.lengthscales[f][d], pj.lengthscales[f][d]);
                        (2.0 * a * b / (a * a + b * b)).sqrt()
                    })
                    .product();
                assert!((v - pref).abs() < 1e-12 && v <= 1.0 + 1e-15);
            }
        }
    }

    #[test]
    fn mixture_selection_and_diagonal() {
        let mut rng = RngStream::new(5);
        let ls = [0.4, 1.1];
        let a = rng.normals(2);
        let b = rng.normals(2);
        for fam in KernelFamily::ALL {
            let p = LocalParams::single_family(fam, &ls, 1.0, 0.0);
            let m = mixture_value(&a, &b, &p, &p, 1.0).unwrap();
            let single = nonstationary_value(fam, &a, &b, &p, &p, 1.0).unwrap();
            assert!((m - single).abs() < 1e-15);
        }
        let p = LocalParams {
            lengthscales: vec![ls.to_vec(); 5],
            noise_variance: 0.0,
            mixture_weights: vec![0.2; 5],
            signal_variance: 2.5,
        };
        assert!((mixture_value(&a, &a, &p, &p, 1.0).unwrap() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn mixture_is_symmetric() {
        let mut rng = RngStream::new(6);
        for _ in 0..50 {
            let pi = random_local(2, &mut rng);
            let pj = random_local(2, &mut rng);
            let (a, b) = (rng.normals(2), rng.normals(2));
            let ab = mixture_value(&a, &b, &pi, &pj, 0.7).unwrap();
            let ba = mixture_value(&b, &a, &pj, &pi, 0.7).unwrap();
            assert!((ab - ba).abs() <= 1e-12);
        }
    }

    #[test]
    fn local_gram_is_psd() {
        let mut rng = RngStream::new(7);
        for fam in KernelFamily::ALL {
            let n = 30;
            let x = Matrix::from_vec(n, 2, rng.normals(2 * n)).unwrap();
            let params: Vec<LocalParams> = (0..n)
                .map(|_| {
                    let mut p = random_local(2, &mut rng);
                    p.mixture_weights = LocalParams::single_family(fam, &[1.0, 1.0], 1.0, 0.0).mixture_weights;
                    p.noise_variance = 0.0;
                    p
                })
                .collect();
            let k = gram(&x, Some(&x), &GramParams::Local { rows: &params, cols: &params, rq_alpha: 1.2 }).unwrap();
            let ev = symmetric_eigenvalues(&k).unwrap();
            assert!(ev[0] >= -1e-8, "{fam:?}: {}", ev[0]);
        }
    }

    #[test]
    fn gram_examples() {
        let x = Matrix::from_rows(&[[0.3, -0.2]]).unwrap();
        let p = StationaryParams::new(vec![1.0, 1.0], 1.0, 0.1);
        let k = gram(&x, None, &GramParams::Stationary { family: KernelFamily::SE, params: &p }).unwrap();
        assert!((k[(0, 0)] - 1.1).abs() < 1e-15);

        let mut rng = RngStream::new(8);
        let xs = Matrix::from_vec(5, 2, rng.normals(10)).unwrap();
        let x2 = Matrix::from_vec(3, 2, rng.normals(6)).unwrap();
        let pa: Vec<_> = (0..5).map(|_| random_local(2, &mut rng)).collect();
        let pb: Vec<_> = (0..3).map(|_| random_local(2, &mut rng)).collect();
        let k = gram(&xs, Some(&x2), &GramParams::Local { rows: &pa, cols: &pb, rq_alpha: 1.0 }).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let v = mixture_value(xs.row(i), x2.row(j), &pa[i], &pb[j], 1.0).unwrap();
                assert!((k[(i, j)] - v).abs() < 1e-14);
            }
        }
        let ks = gram(&xs, None, &GramParams::Local { rows: &pa, cols: &pa, rq_alpha: 1.0 }).unwrap();
        assert!(ks.is_symmetric(0.0));
        for i in 0..5 {
            let v = mixture_value(xs.row(i), xs.row(i), &pa[i], &pa[i], 1.0).unwrap();
            assert!((ks[(i, i)] - v - pa[i].noise_variance).abs() < 1e-14);
        }
    }

    fn log_param_perturbed(p: &LocalParams, slot: usize, h: f64, dim: usize) -> LocalParams {
        let lay = LocalGradLayout { dim };
        let mut q = p.clone();
        if slot >= lay.log_ls() && slot < lay.log_w() {
            let k = slot - lay.log_ls();
            q.lengthscales[k / dim][k % dim] *= h.exp();
        } else if slot >= lay.log_w() && slot < lay.log_s() {
            q.mixture_weights[slot - lay.log_w()] *= h.exp();
        } else if slot == lay.log_s() {
            q.signal_variance *= h.exp();
        }
        q
    }

    #[test]
    fn first_point_partials_match_finite_differences() {
        let mut rng = RngStream::new(9);
        let dim = 3;
        let lay = LocalGradLayout { dim };
        for trial in 0..10 {
            let pi = random_local(dim, &mut rng);
            let pj = random_local(dim, &mut rng);
            let xi: Vec<f64> = rng.normals(dim).iter().map(|v| v * 2.0).collect();
            let xj = rng.normals(dim);
            let alpha = rng.uniform(0.3, 3.0);
            let a = LocalSet::new(std::slice::from_ref(&pi), dim);
            let b = LocalSet::new(std::slice::from_ref(&pj), dim);
            let mut g = vec![0.0; lay.len()];
            let k = a.value_and_grad_first(0, &xi, &b, 0, &xj, alpha, &mut g);
            assert!((k - mixture_value(&xi, &xj, &pi, &pj, alpha).unwrap()).abs() < 1e-13);
            let h = 1e-6;
            for slot in 0..lay.len() {
                let fd = if slot < dim {
                    let mut xp = xi.clone();
                    let mut xm = xi.clone();
                    xp[slot] += h;
                    xm[slot] -= h;
                    (mixture_value(&xp, &xj, &pi, &pj, alpha).unwrap()
                        - mixture_value(&xm, &xj, &pi, &pj, alpha).unwrap())
                        / (2.0 * h)
                } else if slot == lay.alpha() {
                    (mixture_value(&xi, &xj, &pi, &pj, alpha + h).unwrap()
                        - mixture_value(&xi, &xj, &pi, &pj, alpha - h).unwrap())
                        / (2.0 * h)
                } else {
                    let pp = log_param_perturbed(&pi, slot, h, dim);
                    let pm = log_param_perturbed(&pi, slot, -h, dim);
                    // weights are treated as free here (no renormalization)
                    let f = |p: &LocalParams| {
                        let mut s = 0.0;
                        for fam in KernelFamily::ALL {
                            let w = (p.mixture_weights[fam.index()] * pj.mixture_weights[fam.index()]).sqrt();
                            s += w * nonstationary_value(fam, &xi, &xj, p, &pj, alpha).unwrap();
                        }
                        (p.signal_variance * pj.signal_variance).sqrt() * s
                    };
                    (f(&pp) - f(&pm)) / (2.0 * h)
                };
                assert!(
                    (g[slot] - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "trial {trial} slot {slot}: {} vs {fd}",
                    g[slot]
                );
            }
        }
    }
}
