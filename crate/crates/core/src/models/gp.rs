use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{check_queries, check_training_data, worker_chunks, DynamicsModel, Linearization, PredictiveGaussian, Standardizer};
use crate::diffopt::{optimize, Objective, OptimConfig, ParamVector};
use crate::exec::{map_indices, Execution};
use crate::kernels::StationaryParams;
use crate::numerics::{gemm, Cholesky, Matrix, RngStream};
use crate::{Error, Result};

const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpFitConfig {
    pub optim: OptimConfig,
    /// Starting hyperparameters per output (standardized units).
    #[serde(default)]
    pub init: Option<Vec<StationaryParams>>,
    #[serde(default)]
    pub exec: Execution,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        GpFitConfig {
            optim: OptimConfig { learning_rate: 0.05, max_steps: 300, patience: 20, ..OptimConfig::default() },
            init: None,
            exec: Execution::default(),
        }
    }
}

/// Exact GP with a squared-exponential kernel, one independent GP per output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    inputs: Matrix,
    targets: Matrix,
    input_scaler: Standardizer,
    target_scaler: Standardizer,
    params: Vec<StationaryParams>,
    #[serde(skip)]
    cache: Option<GpCache>,
}

#[derive(Debug, Clone)]
struct GpCache {
    xs: Matrix,
    outputs: Vec<OutputCache>,
}

#[derive(Debug, Clone)]
struct OutputCache {
    chol: Cholesky,
    alpha: Vec<f64>,
    k_inv: Matrix,
}

#[inline]
fn se(xa: &[f64], xb: &[f64], inv_l2: &[f64], s: f64) -> f64 {
    let mut u = 0.0;
    for d in 0..xa.len() {
        let t = xa[d] - xb[d];
        u += t * t * inv_l2[d];
    }
    s * (-0.5 * u).exp()
}

fn se_gram(xs: &Matrix, p: &StationaryParams) -> Matrix {
    let n = xs.rows();
    let inv_l2: Vec<f64> = p.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = se(xs.row(i), xs.row(j), &inv_l2, p.signal_variance);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = p.signal_variance + p.noise_variance;
    }
    k
}

/// Log marginal likelihood of `y` under an SE-kernel GP and its gradient with
/// respect to `[ln ℓ₁ … ln ℓ_D, ln s, ln σ²ₙ]`.
pub fn gp_log_marginal_likelihood(xs: &Matrix, y: &[f64], log_params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let d = xs.cols();
    if log_params.len() != d + 2 || y.len() != xs.rows() {
        return Err(Error::invalid("parameter or target length mismatch"));
    }
    let n = xs.rows();
    let p = StationaryParams::new(
        log_params[..d].iter().map(|v| v.exp()).collect(),
        log_params[d].exp(),
        log_params[d + 1].exp(),
    );
    let k = se_gram(xs, &p);
    let chol = Cholesky::factor(&k)?;
    let alpha = chol.solve_vec(y);
    let lml = -0.5 * crate::numerics::dot(y, &alpha)
        - 0.5 * chol.log_det()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    let k_inv = chol.inverse();
    let inv_l2: Vec<f64> = p.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - k_inv[(i, j)];
            let k0 = if i == j { p.signal_variance } else { k[(i, j)] };
            grad[d] += w * k0;
            if i != j {
                let (xi, xj) = (xs.row(i), xs.row(j));
                for dd in 0..d {
                    let t = xi[dd] - xj[dd];
                    grad[dd] += w * k0 * t * t * inv_l2[dd];
                }
            }
        }
        grad[d + 1] += (alpha[i] * alpha[i] - k_inv[(i, i)]) * p.noise_variance;
    }
    grad.iter_mut().for_each(|g| *g *= 0.5);
    Ok((lml, grad))
}

struct LmlObjective<'a> {
    xs: &'a Matrix,
    y: Vec<f64>,
}

impl Objective for LmlObjective<'_> {
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let n = self.y.len() as f64;
        let (lml, g) = gp_log_marginal_likelihood(self.xs, &self.y, params.values())?;
        Ok((-lml / n, g.into_iter().map(|v| -v / n).collect()))
    }
}

fn log_param_vector(p: &StationaryParams) -> ParamVector {
    let mut v = ParamVector::new();
    v.push_segment("log_lengthscales", p.lengthscales.iter().map(|l| l.ln()).collect(), 0.0, 1.0);
    v.push_segment("log_signal", vec![p.signal_variance.ln()], 0.0, 1.0);
    v.push_segment("log_noise", vec![p.noise_variance.ln()], (1e-2f64).ln(), 1.0);
    v
}

/// Fit one GP per output by maximizing the log marginal likelihood.
pub fn gp_fit(inputs: &Matrix, targets: &Matrix, cfg: &GpFitConfig, rng: &mut RngStream) -> Result<GpModel> {
    check_training_data(inputs, targets)?;
    let d = inputs.cols();
    let input_scaler = Standardizer::fit(inputs);
    let target_scaler = Standardizer::fit(targets);
    let xs = input_scaler.apply(inputs);
    let ys = target_scaler.apply(targets);
    if let Some(init) = &cfg.init {
        if init.len() != targets.cols() || init.iter().any(|p| p.lengthscales.len() != d) {
            return Err(Error::invalid("initial GP params have the wrong shape"));
        }
    }
    let base = RngStream::new(rng.next_u64());
    let fitted: Vec<Result<StationaryParams>> = map_indices(cfg.exec, targets.cols(), |o| {
        let start = cfg
            .init
            .as_ref()
            .map(|v| v[o].clone())
            .unwrap_or_else(|| StationaryParams::new(vec![1.0; d], 1.0, 1e-2));
        let mut obj = LmlObjective { xs: &xs, y: ys.column(o) };
        let out = optimize(&mut obj, &log_param_vector(&start), &cfg.optim, &mut base.substream(o as u64))?;
        let v = out.params.values();
        Ok(StationaryParams::new(v[..d].iter().map(|x| x.exp()).collect(), v[d].exp(), v[d + 1].exp()))
    });
    let params = fitted.into_iter().collect::<Result<Vec<_>>>()?;
    GpModel::with_scalers(inputs.clone(), targets.clone(), input_scaler, target_scaler, params)
}

impl GpModel {
    /// A GP on raw (unstandardized) data with fixed hyperparameters.
    pub fn from_params(inputs: Matrix, targets: Matrix, params: Vec<StationaryParams>) -> Result<GpModel> {
        let (di, dt) = (inputs.cols(), targets.cols());
        GpModel::with_scalers(inputs, targets, Standardizer::identity(di), Standardizer::identity(dt), params)
    }

    pub fn with_scalers(
        inputs: Matrix,
        targets: Matrix,
        input_scaler: Standardizer,
        target_scaler: Standardizer,
        params: Vec<StationaryParams>,
    ) -> Result<GpModel> {
        if inputs.rows() != targets.rows() || inputs.rows() == 0 {
            return Err(Error::invalid("inputs and targets must be non-empty and the same length"));
        }
        if params.len() != targets.cols() {
            return Err(Error::invalid("one parameter set per output required"));
        }
        for p in &params {
            p.validate()?;
            if p.lengthscales.len() != inputs.cols() {
                return Err(Error::invalid("lengthscale count does not match input dimension"));
            }
        }
        let mut m = GpModel { inputs, targets, input_scaler, target_scaler, params, cache: None };
        m.rebuild()?;
        Ok(m)
    }

    /// Recompute the cached factorizations (needed after deserialization).
    pub fn rebuild(&mut self) -> Result<()> {
        let xs = self.input_scaler.apply(&self.inputs);
        let ys = self.target_scaler.apply(&self.targets);
        let outputs = self
            .params
            .iter()
            .enumerate()
            .map(|(o, p)| {
                let chol = Cholesky::factor(&se_gram(&xs, p))?;
                let alpha = chol.solve_vec(&ys.column(o));
                let k_inv = chol.inverse();
                Ok(OutputCache { chol, alpha, k_inv })
            })
            .collect::<Result<Vec<_>>>()?;
        self.cache = Some(GpCache { xs, outputs });
        Ok(())
    }

    fn cache(&self) -> &GpCache {
        self.cache.as_ref().expect("GP cache is built on construction")
    }

    pub fn params(&self) -> &[StationaryParams] {
        &self.params
    }

    pub fn input_scaler(&self) -> &Standardizer {
        &self.input_scaler
    }

    pub fn target_scaler(&self) -> &Standardizer {
        &self.target_scaler
    }

    pub fn train_inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn train_targets(&self) -> &Matrix {
        &self.targets
    }

    /// Predictions whose variance includes the observation noise.
    pub fn predict_with_noise(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>> {
        let mut out = self.predict(x)?;
        for p in &mut out {
            for (o, v) in p.variance.iter_mut().enumerate() {
                *v += self.target_scaler.restore_variance(o, self.params[o].noise_variance);
            }
        }
        Ok(out)
    }

    fn predict_one(&self, x: &[f64]) -> PredictiveGaussian {
        let cache = self.cache();
        let xs = self.input_scaler.apply_row(x);
        let n = cache.xs.rows();
        let mut mean = Vec::with_capacity(self.params.len());
        let mut variance = Vec::with_capacity(self.params.len());
        for (o, (p, oc)) in self.params.iter().zip(&cache.outputs).enumerate() {
            let inv_l2: Vec<f64> = p.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
            let mut k: Vec<f64> = (0..n).map(|j| se(&xs, cache.xs.row(j), &inv_l2, p.signal_variance)).collect();
            let m = crate::numerics::dot(&k, &oc.alpha);
            oc.chol.forward_in_place(&mut k);
            let v = (p.signal_variance - crate::numerics::dot(&k, &k)).max(VARIANCE_FLOOR);
            mean.push(self.target_scaler.restore_mean(o, m));
            variance.push(self.target_scaler.restore_variance(o, v).max(VARIANCE_FLOOR));
        }
        PredictiveGaussian { mean, variance }
    }

    fn linearize_chunk(&self, x: &Matrix, range: std::ops::Range<usize>) -> Vec<Linearization> {
        let cache = self.cache();
        let (n, d, q) = (cache.xs.rows(), x.cols(), range.len());
        let outs = self.params.len();
        let xq: Vec<Vec<f64>> = range.clone().map(|r| self.input_scaler.apply_row(x.row(r))).collect();
        let mut result: Vec<Linearization> = (0..q)
            .map(|_| Linearization {
                prediction: PredictiveGaussian { mean: vec![0.0; outs], variance: vec![0.0; outs] },
                mean_jacobian: Matrix::zeros(outs, d),
                variance_jacobian: Matrix::zeros(outs, d),
            })
            .collect();
        for (o, (p, oc)) in self.params.iter().zip(&cache.outputs).enumerate() {
            let inv_l2: Vec<f64> = p.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
            let mut kq = Matrix::zeros(q, n);
            for (qi, xv) in xq.iter().enumerate() {
                for j in 0..n {
                    kq[(qi, j)] = se(xv, cache.xs.row(j), &inv_l2, p.signal_variance);
                }
            }
            let mut beta = Matrix::zeros(q, n);
            gemm(1.0, &kq, false, &oc.k_inv, false, 0.0, &mut beta);
            let ys = self.target_scaler.std[o];
            for (qi, xv) in xq.iter().enumerate() {
                let k = kq.row(qi);
                let b = beta.row(qi);
                let m = crate::numerics::dot(k, &oc.alpha);
                let raw_var = p.signal_variance - crate::numerics::dot(k, b);
                let mut dm = vec![0.0; d];
                let mut dv = vec![0.0; d];
                for j in 0..n {
                    let xj = cache.xs.row(j);
                    let (wm, wv) = (oc.alpha[j] * k[j], -2.0 * b[j] * k[j]);
                    for dd in 0..d {
                        let g = -(xv[dd] - xj[dd]) * inv_l2[dd];
                        dm[dd] += wm * g;
                        dv[dd] += wv * g;
                    }
                }
                let lin = &mut result[qi];
                lin.prediction.mean[o] = self.target_scaler.restore_mean(o, m);
                let floored = raw_var <= VARIANCE_FLOOR;
                lin.prediction.variance[o] = self.target_scaler.restore_variance(o, raw_var.max(VARIANCE_FLOOR)).max(VARIANCE_FLOOR);
                for dd in 0..d {
                    let sx = self.input_scaler.std[dd];
                    lin.mean_jacobian[(o, dd)] = dm[dd] * ys / sx;
                    lin.variance_jacobian[(o, dd)] = if floored { 0.0 } else { dv[dd] * ys * ys / sx };
                }
            }
        }
        result
    }
}

impl DynamicsModel for GpModel {
    fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    fn output_dim(&self) -> usize {
        self.targets.cols()
    }

    fn predict(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>> {
        check_queries(x, self.input_dim())?;
        Ok(map_indices(Execution::Sequential, x.rows(), |r| self.predict_one(x.row(r))))
    }

    fn linearize(&self, x: &Matrix, exec: Execution) -> Result<Vec<Linearization>> {
        check_queries(x, self.input_dim())?;
        let chunks = worker_chunks(exec, x.rows());
        Ok(map_indices(exec, chunks.len(), |c| self.linearize_chunk(x, chunks[c].clone()))
            .into_iter()
            .flatten()
            .collect())
    }
}
