//! Radial-basis-function controller.
//!
//! `raw(s) = Σᵢ wᵢ exp(-½ ‖(s - cᵢ) / ℓ‖²)` with lengthscales shared by all
//! basis functions, squashed to `u_max · (9 sin raw + sin 3·raw) / 8`, which is
//! odd, smooth and attains exactly `±u_max`.

use serde::{Deserialize, Serialize};

use crate::diffopt::ParamVector;
use crate::numerics::{Matrix, RngStream};
use crate::{Error, Result};

/// `(state_dim + 1) · n_basis + state_dim`.
pub fn param_count(state_dim: usize, n_basis: usize) -> usize {
    (state_dim + 1) * n_basis + state_dim
}

#[inline]
pub fn squash(x: f64) -> f64 {
    (9.0 * x.sin() + (3.0 * x).sin()) / 8.0
}

#[inline]
pub fn squash_derivative(x: f64) -> f64 {
    (9.0 * x.cos() + 3.0 * (3.0 * x).cos()) / 8.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfPolicy {
    centers: Matrix,
    weights: Vec<f64>,
    lengthscales: Vec<f64>,
    u_max: f64,
}

impl RbfPolicy {
    pub fn new(centers: Matrix, weights: Vec<f64>, lengthscales: Vec<f64>, u_max: f64) -> Result<RbfPolicy> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(Error::invalid("policy needs at least one basis function and one state dimension"));
        }
        if weights.len() != centers.rows() || lengthscales.len() != centers.cols() {
            return Err(Error::invalid("policy weight or lengthscale count mismatch"));
        }
        if lengthscales.iter().any(|l| !(*l > 0.0) || !l.is_finite()) || !(u_max > 0.0) {
            return Err(Error::invalid("lengthscales and u_max must be positive"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("policy weights must be finite"));
        }
        Ok(RbfPolicy { centers, weights, lengthscales, u_max })
    }

    /// Centers `~ N(0, diag(obs_scale²))`, weights `~ N(0, 1)`, lengthscales
    /// equal to `obs_scale`.
    pub fn init(state_dim: usize, n_basis: usize, u_max: f64, obs_scale: &[f64], rng: &mut RngStream) -> Result<RbfPolicy> {
        if state_dim == 0 || n_basis == 0 {
            return Err(Error::invalid("state_dim and n_basis must be at least 1"));
        }
        if obs_scale.len() != state_dim {
            return Err(Error::invalid("obs_scale must have one entry per state dimension"));
        }
        let centers = Matrix::from_fn(n_basis, state_dim, |_, d| obs_scale[d] * rng.normal());
        let weights = rng.normals(n_basis);
        RbfPolicy::new(centers, weights, obs_scale.to_vec(), u_max)
    }

    pub fn state_dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn n_basis(&self) -> usize {
        self.centers.rows()
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn param_count(&self) -> usize {
        param_count(self.state_dim(), self.n_basis())
    }

    /// Flat view: centers (row-major), weights, log-lengthscales.
    pub fn to_params(&self) -> ParamVector {
        let mut p = ParamVector::new();
        let scale = self.lengthscales.iter().sum::<f64>() / self.lengthscales.len() as f64;
        p.push_segment("centers", self.centers.as_slice().to_vec(), 0.0, scale);
        p.push_segment("weights", self.weights.clone(), 0.0, 1.0);
        p.push_segment("log_lengthscales", self.lengthscales.iter().map(|l| l.ln()).collect(), scale.ln(), 0.5);
        p
    }

    /// Same shape and bound, parameters taken from `values` (layout of [`Self::to_params`]).
    pub fn with_params(&self, values: &[f64]) -> Result<RbfPolicy> {
        let (n, d) = (self.n_basis(), self.state_dim());
        if values.len() != self.param_count() {
            return Err(Error::invalid(format!("expected {} policy parameters, got {}", self.param_count(), values.len())));
        }
        let centers = Matrix::from_vec(n, d, values[..n * d].to_vec())?;
        let weights = values[n * d..n * d + n].to_vec();
        let lengthscales = values[n * d + n..].iter().map(|v| v.exp()).collect();
        RbfPolicy::new(centers, weights, lengthscales, self.u_max)
    }

    pub fn raw(&self, s: &[f64]) -> Result<f64> {
        if s.len() != self.state_dim() {
            return Err(Error::invalid(format!("state has {} entries, policy expects {}", s.len(), self.state_dim())));
        }
        let inv: Vec<f64> = self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        Ok((0..self.n_basis()).map(|i| self.weights[i] * self.basis(i, s, &inv)).sum())
    }

    #[inline]
    fn basis(&self, i: usize, s: &[f64], inv_l2: &[f64]) -> f64 {
        let c = self.centers.row(i);
        let mut u = 0.0;
        for d in 0..s.len() {
            let t = s[d] - c[d];
            u += t * t * inv_l2[d];
        }
        (-0.5 * u).exp()
    }

    pub fn action(&self, s: &[f64]) -> Result<f64> {
        Ok(self.u_max * squash(self.raw(s)?))
    }

    /// Action with its gradient with respect to the flat parameters
    /// (`grad_params`, layout of [`Self::to_params`]) and the state (`grad_state`).
    /// Both buffers are overwritten.
    pub fn action_and_grad(&self, s: &[f64], grad_params: &mut [f64], grad_state: &mut [f64]) -> Result<f64> {
        let (n, d) = (self.n_basis(), self.state_dim());
        if s.len() != d || grad_params.len() != self.param_count() || grad_state.len() != d {
            return Err(Error::invalid("policy gradient buffers have the wrong size"));
        }
        let inv: Vec<f64> = self.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        grad_params.iter_mut().for_each(|g| *g = 0.0);
        grad_state.iter_mut().for_each(|g| *g = 0.0);
        let mut raw = 0.0;
        let (gc, rest) = grad_params.split_at_mut(n * d);
        let (gw, gl) = rest.split_at_mut(n);
        for i in 0..n {
            let phi = self.basis(i, s, &inv);
            raw += self.weights[i] * phi;
            gw[i] = phi;
            let wp = self.weights[i] * phi;
            let c = self.centers.row(i);
            for k in 0..d {
                let t = (s[k] - c[k]) * inv[k];
                gc[i * d + k] = wp * t;
                grad_state[k] -= wp * t;
                gl[k] += wp * t * (s[k] - c[k]);
            }
        }
        let scale = self.u_max * squash_derivative(raw);
        grad_params.iter_mut().for_each(|g| *g *= scale);
        grad_state.iter_mut().for_each(|g| *g *= scale);
        Ok(self.u_max * squash(raw))
    }
}
