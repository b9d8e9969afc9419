//! Nonstationary GP whose kernel parameters are produced pointwise by a
//! neural network.
//!
//! For every output dimension a network maps a (standardized) input to
//! `F·D` lengthscale heads, `F` mixture-weight logits, one noise head and one
//! signal head, where `F` is the number of kernel families. Heads pass through
//! softplus (lengthscales, signal, noise) and softmax (weights). The network
//! weights are trained on random subsets of the data by maximizing the
//! subset's marginal likelihood; gradients flow from the Gram matrix through
//! the per-point kernel parameters back into the network.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use super::{check_queries, check_training_data, worker_chunks, DynamicsModel, Linearization, PredictiveGaussian, Standardizer};
use crate::diffopt::{optimize, sigmoid, softplus, softplus_inv, Objective, OptimConfig, ParamVector};
use crate::exec::{map_indices, Execution};
use crate::kernels::{KernelFamily, LocalParams, LocalSet};
use crate::numerics::{dot, gemm, Cholesky, Matrix, RngStream};
use crate::{Error, Result};

pub const DGCN_LENGTHSCALE_FLOOR: f64 = 1e-6;
pub const DGCN_NOISE_FLOOR: f64 = 1e-8;
const VARIANCE_FLOOR: f64 = 1e-12;
const F: usize = KernelFamily::COUNT;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgcnFitConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    /// Coefficient of the squared-weight penalty added to the per-point objective.
    pub weight_decay: f64,
    pub optim: OptimConfig,
    /// Warm start, one entry per output; must match `hidden`.
    #[serde(default)]
    pub init: Option<Vec<DgcnOutput>>,
    #[serde(default)]
    pub exec: Execution,
}

impl Default for DgcnFitConfig {
    fn default() -> Self {
        DgcnFitConfig {
            hidden: vec![64, 64],
            batch_size: 128,
            weight_decay: 1e-2,
            optim: OptimConfig {
                learning_rate: 5e-3,
                max_steps: 500,
                patience: usize::MAX,
                keep_last: true,
                ..OptimConfig::default()
            },
            init: None,
            exec: Execution::default(),
        }
    }
}

/// Network weights and rational-quadratic shape for one output dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgcnOutput {
    pub nn_weights: Vec<f64>,
    pub rq_alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DgcnModel {
    inputs: Matrix,
    targets: Matrix,
    input_scaler: Standardizer,
    target_scaler: Standardizer,
    net: Mlp,
    outputs: Vec<DgcnOutput>,
    #[serde(skip)]
    cache: Option<DgcnCache>,
}

#[derive(Debug, Clone)]
struct DgcnCache {
    xs: Matrix,
    outputs: Vec<OutputCache>,
}

#[derive(Debug, Clone)]
struct OutputCache {
    train: LocalSet,
    chol: Cholesky,
    alpha: Vec<f64>,
    k_inv: Matrix,
}

/// Number of network outputs for `dim` inputs.
pub fn head_count(dim: usize) -> usize {
    F * dim + F + 2
}

/// Network for `dim` inputs with the given hidden widths.
pub fn dgcn_network(dim: usize, hidden: &[usize]) -> Mlp {
    Mlp::new(dim, hidden, head_count(dim), Activation::Tanh)
}

fn heads_to_params(h: &[f64], dim: usize) -> LocalParams {
    let lengthscales = (0..F)
        .map(|f| (0..dim).map(|d| softplus(h[f * dim + d]) + DGCN_LENGTHSCALE_FLOOR).collect())
        .collect();
    let logits = &h[F * dim..F * dim + F];
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    LocalParams {
        lengthscales,
        mixture_weights: e.iter().map(|v| v / z).collect(),
        noise_variance: softplus(h[F * dim + F]) + DGCN_NOISE_FLOOR,
        signal_variance: softplus(h[F * dim + F + 1]) + DGCN_LENGTHSCALE_FLOOR,
    }
}

/// Map partials with respect to log-parameters (kernel gradient layout, the
/// input slots ignored) and the noise variance to partials with respect to
/// the heads.
fn log_grad_to_heads(h: &[f64], p: &LocalParams, g: &[f64], g_noise: f64, out: &mut [f64]) {
    let dim = p.dim();
    let lay = crate::kernels::LocalGradLayout { dim };
    for f in 0..F {
        for d in 0..dim {
            let i = f * dim + d;
            out[i] = g[lay.log_ls() + i] * sigmoid(h[i]) / p.lengthscales[f][d];
        }
    }
    let gw = &g[lay.log_w()..lay.log_w() + F];
    let total: f64 = gw.iter().sum();
    for f in 0..F {
        out[F * dim + f] = gw[f] - p.mixture_weights[f] * total;
    }
    out[F * dim + F] = g_noise * sigmoid(h[F * dim + F]);
    out[F * dim + F + 1] = g[lay.log_s()] * sigmoid(h[F * dim + F + 1]) / p.signal_variance;
}

fn local_gram(set: &LocalSet, params: &[LocalParams], xs: &Matrix, rq_alpha: f64) -> Matrix {
    let n = xs.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = set.value(i, xs.row(i), set, j, xs.row(j), rq_alpha);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] = params[i].signal_variance + params[i].noise_variance;
    }
    k
}

/// Negative batch log marginal likelihood (per point) and its gradient with
/// respect to `[nn weights…, ln α]`.
fn batch_objective(net: &Mlp, params: &[f64], decay: f64, xs: &Matrix, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (b, dim) = (xs.rows(), xs.cols());
    let nn = &params[..params.len() - 1];
    let rq_alpha = params[params.len() - 1].exp();
    let cache = net.forward_batch(nn, xs);
    let heads = cache.output();
    let local: Vec<LocalParams> = (0..b).map(|i| heads_to_params(heads.row(i), dim)).collect();
    let set = LocalSet::new(&local, dim);
    let k = local_gram(&set, &local, xs, rq_alpha);
    let chol = Cholesky::factor(&k)?;
    let alpha = chol.solve_vec(y);
    let bf = b as f64;
    let lml = -0.5 * dot(y, &alpha) - 0.5 * chol.log_det() - 0.5 * bf * (2.0 * std::f64::consts::PI).ln();
    let k_inv = chol.inverse();
    // ∂(-lml/b)/∂K
    let g = Matrix::from_fn(b, b, |i, j| -(alpha[i] * alpha[j] - k_inv[(i, j)]) / (2.0 * bf));
    let lay = set.grad_layout();
    let mut partial = vec![0.0; lay.len()];
    let mut d_heads = Matrix::zeros(b, heads.cols());
    let mut g_alpha = 0.0;
    let mut acc = vec![0.0; lay.len()];
    for i in 0..b {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..b {
            if i == j {
                continue;
            }
            set.value_and_grad_first(i, xs.row(i), &set, j, xs.row(j), rq_alpha, &mut partial);
            let w = g[(i, j)];
            for (a, p) in acc.iter_mut().zip(&partial) {
                *a += 2.0 * w * p;
            }
            g_alpha += w * partial[lay.alpha()];
        }
        acc[lay.log_s()] += g[(i, i)] * local[i].signal_variance;
        log_grad_to_heads(heads.row(i), &local[i], &acc, g[(i, i)], d_heads.row_mut(i));
    }
    let mut grad = vec![0.0; params.len()];
    net.backward_batch(nn, &cache, &d_heads, &mut grad[..params.len() - 1]);
    grad[params.len() - 1] = g_alpha * rq_alpha;
    net.add_weight_decay_grad(nn, decay, &mut grad[..params.len() - 1]);
    Ok((-lml / bf + decay * net.weight_sq_norm(nn), grad))
}

struct BatchObjective<'a> {
    net: &'a Mlp,
    xs: &'a Matrix,
    y: Vec<f64>,
    batch: usize,
    decay: f64,
    rng: RngStream,
}

impl Objective for BatchObjective<'_> {
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let n = self.xs.rows();
        if self.batch >= n {
            return batch_objective(self.net, params.values(), self.decay, self.xs, &self.y);
        }
        let mut idx = self.rng.sample_indices(n, self.batch);
        idx.sort_unstable();
        let xb = Matrix::from_fn(idx.len(), self.xs.cols(), |r, c| self.xs[(idx[r], c)]);
        let yb: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
        batch_objective(self.net, params.values(), self.decay, &xb, &yb)
    }
}

impl DgcnOutput {
    /// Random weights with the output biases set so that every point starts
    /// at unit lengthscales and signal, noise 0.01 and uniform family weights.
    pub fn init(net: &Mlp, rng: &mut RngStream) -> DgcnOutput {
        let mut w = net.init(rng, 0.1);
        let dim = net.input_dim();
        let bias = net.output_bias_mut(&mut w);
        for b in bias[..F * dim].iter_mut() {
            *b = softplus_inv(1.0);
        }
        bias[F * dim + F] = softplus_inv(1e-2);
        bias[F * dim + F + 1] = softplus_inv(1.0);
        DgcnOutput { nn_weights: w, rq_alpha: 1.0 }
    }

    /// Zero weights and biases chosen so that the network outputs `p` at
    /// every input (zero mixture weights become very negative logits).
    pub fn constant(net: &Mlp, p: &LocalParams, rq_alpha: f64) -> Result<DgcnOutput> {
        let dim = net.input_dim();
        p.validate(dim)?;
        if p.signal_variance <= DGCN_LENGTHSCALE_FLOOR
            || p.noise_variance <= DGCN_NOISE_FLOOR
            || p.lengthscales.iter().flatten().any(|l| *l <= DGCN_LENGTHSCALE_FLOOR)
        {
            return Err(Error::invalid("constant parameters must exceed the softplus floors"));
        }
        let mut w = vec![0.0; net.param_count()];
        let bias = net.output_bias_mut(&mut w);
        for f in 0..F {
            for d in 0..dim {
                bias[f * dim + d] = softplus_inv(p.lengthscales[f][d] - DGCN_LENGTHSCALE_FLOOR);
            }
            bias[F * dim + f] = p.mixture_weights[f].max(1e-300).ln();
        }
        bias[F * dim + F] = softplus_inv(p.noise_variance - DGCN_NOISE_FLOOR);
        bias[F * dim + F + 1] = softplus_inv(p.signal_variance - DGCN_LENGTHSCALE_FLOOR);
        Ok(DgcnOutput { nn_weights: w, rq_alpha })
    }
}

pub fn dgcn_fit(inputs: &Matrix, targets: &Matrix, cfg: &DgcnFitConfig, rng: &mut RngStream) -> Result<DgcnModel> {
    check_training_data(inputs, targets)?;
    if cfg.batch_size < 2 {
        return Err(Error::invalid("batch size must be at least 2"));
    }
    let dim = inputs.cols();
    let net = dgcn_network(dim, &cfg.hidden);
    if let Some(init) = &cfg.init {
        if init.len() != targets.cols() || init.iter().any(|o| o.nn_weights.len() != net.param_count()) {
            return Err(Error::invalid("warm start does not match the network"));
        }
    }
    let input_scaler = Standardizer::fit(inputs);
    let target_scaler = Standardizer::fit(targets);
    let xs = input_scaler.apply(inputs);
    let ys = target_scaler.apply(targets);
    let base = RngStream::new(rng.next_u64());
    let fitted = map_indices(cfg.exec, targets.cols(), |o| {
        let mut stream = base.substream(o as u64);
        let start = match &cfg.init {
            Some(v) => v[o].clone(),
            None => DgcnOutput::init(&net, &mut stream),
        };
        let mut pv = ParamVector::new();
        pv.push_segment("nn_weights", start.nn_weights, 0.0, 0.1);
        pv.push_segment("log_rq_alpha", vec![start.rq_alpha.ln()], 0.0, 1.0);
        let mut obj =
            BatchObjective { net: &net, xs: &xs, y: ys.column(o), batch: cfg.batch_size, decay: cfg.weight_decay, rng: stream.substream(1) };
        let out = optimize(&mut obj, &pv, &cfg.optim, &mut stream)?;
        let v = out.params.values();
        Ok(DgcnOutput { nn_weights: v[..v.len() - 1].to_vec(), rq_alpha: v[v.len() - 1].exp() })
    });
    let outputs = fitted.into_iter().collect::<Result<Vec<_>>>()?;
    DgcnModel::with_scalers(inputs.clone(), targets.clone(), input_scaler, target_scaler, net, outputs)
}

impl DgcnModel {
    /// Model on raw data (identity standardization) with given networks.
    pub fn from_params(inputs: Matrix, targets: Matrix, net: Mlp, outputs: Vec<DgcnOutput>) -> Result<DgcnModel> {
        let (di, dt) = (inputs.cols(), targets.cols());
        DgcnModel::with_scalers(inputs, targets, Standardizer::identity(di), Standardizer::identity(dt), net, outputs)
    }

    pub fn with_scalers(
        inputs: Matrix,
        targets: Matrix,
        input_scaler: Standardizer,
        target_scaler: Standardizer,
        net: Mlp,
        outputs: Vec<DgcnOutput>,
    ) -> Result<DgcnModel> {
        if inputs.rows() != targets.rows() || inputs.rows() == 0 {
            return Err(Error::invalid("inputs and targets must be non-empty and the same length"));
        }
        if net.input_dim() != inputs.cols() || net.output_dim() != head_count(inputs.cols()) {
            return Err(Error::invalid("network shape does not match the input dimension"));
        }
        if outputs.len() != targets.cols()
            || outputs.iter().any(|o| o.nn_weights.len() != net.param_count() || !(o.rq_alpha > 0.0))
        {
            return Err(Error::invalid("one valid network per output required"));
        }
        let mut m = DgcnModel { inputs, targets, input_scaler, target_scaler, net, outputs, cache: None };
        m.rebuild()?;
        Ok(m)
    }

    /// Recompute per-point parameters and factorizations on the full data.
    pub fn rebuild(&mut self) -> Result<()> {
        let xs = self.input_scaler.apply(&self.inputs);
        let ys = self.target_scaler.apply(&self.targets);
        let dim = xs.cols();
        let outputs = self
            .outputs
            .iter()
            .enumerate()
            .map(|(o, out)| {
                let heads = self.net.forward_batch(&out.nn_weights, &xs);
                let local: Vec<LocalParams> =
                    (0..xs.rows()).map(|i| heads_to_params(heads.output().row(i), dim)).collect();
                let train = LocalSet::new(&local, dim);
                let chol = Cholesky::factor(&local_gram(&train, &local, &xs, out.rq_alpha))?;
                let alpha = chol.solve_vec(&ys.column(o));
                let k_inv = chol.inverse();
                Ok(OutputCache { train, chol, alpha, k_inv })
            })
            .collect::<Result<Vec<_>>>()?;
        self.cache = Some(DgcnCache { xs, outputs });
        Ok(())
    }

    fn cache(&self) -> &DgcnCache {
        self.cache.as_ref().expect("DGCN cache is built on construction")
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn outputs(&self) -> &[DgcnOutput] {
        &self.outputs
    }

    pub fn input_scaler(&self) -> &Standardizer {
        &self.input_scaler
    }

    pub fn target_scaler(&self) -> &Standardizer {
        &self.target_scaler
    }

    /// Kernel parameters at `x` (data units) for every output, in standardized
    /// units.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<LocalParams>> {
        if x.len() != self.net.input_dim() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("query must be finite and match the input dimension"));
        }
        let xs = self.input_scaler.apply_row(x);
        Ok(self.outputs.iter().map(|o| heads_to_params(&self.net.forward(&o.nn_weights, &xs), xs.len())).collect())
    }

    /// Predictions whose variance includes the locally predicted noise.
    pub fn predict_with_noise(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>> {
        let mut out = self.predict(x)?;
        for (r, p) in out.iter_mut().enumerate() {
            let local = self.forward(x.row(r))?;
            for (o, v) in p.variance.iter_mut().enumerate() {
                *v += self.target_scaler.restore_variance(o, local[o].noise_variance);
            }
        }
        Ok(out)
    }

    fn predict_one(&self, x: &[f64]) -> PredictiveGaussian {
        let cache = self.cache();
        let xs = self.input_scaler.apply_row(x);
        let dim = xs.len();
        let n = cache.xs.rows();
        let mut mean = Vec::with_capacity(self.outputs.len());
        let mut variance = Vec::with_capacity(self.outputs.len());
        for (o, (out, oc)) in self.outputs.iter().zip(&cache.outputs).enumerate() {
            let p = heads_to_params(&self.net.forward(&out.nn_weights, &xs), dim);
            let q = LocalSet::new(std::slice::from_ref(&p), dim);
            let mut k: Vec<f64> =
                (0..n).map(|j| q.value(0, &xs, &oc.train, j, cache.xs.row(j), out.rq_alpha)).collect();
            let m = dot(&k, &oc.alpha);
            oc.chol.forward_in_place(&mut k);
            let v = (p.signal_variance - dot(&k, &k)).max(VARIANCE_FLOOR);
            mean.push(self.target_scaler.restore_mean(o, m));
            variance.push(self.target_scaler.restore_variance(o, v).max(VARIANCE_FLOOR));
        }
        PredictiveGaussian { mean, variance }
    }

    fn linearize_chunk(&self, x: &Matrix, range: std::ops::Range<usize>) -> Vec<Linearization> {
        let cache = self.cache();
        let (n, dim, q) = (cache.xs.rows(), x.cols(), range.len());
        let outs = self.outputs.len();
        let xq: Vec<Vec<f64>> = range.clone().map(|r| self.input_scaler.apply_row(x.row(r))).collect();
        let mut result: Vec<Linearization> = (0..q)
            .map(|_| Linearization {
                prediction: PredictiveGaussian { mean: vec![0.0; outs], variance: vec![0.0; outs] },
                mean_jacobian: Matrix::zeros(outs, dim),
                variance_jacobian: Matrix::zeros(outs, dim),
            })
            .collect();
        let heads_n = head_count(dim);
        for (o, (out, oc)) in self.outputs.iter().zip(&cache.outputs).enumerate() {
            let fwd: Vec<(Vec<f64>, Matrix)> =
                xq.iter().map(|xv| self.net.forward_jacobian(&out.nn_weights, xv)).collect();
            let local: Vec<LocalParams> = fwd.iter().map(|(h, _)| heads_to_params(h, dim)).collect();
            let qset = LocalSet::new(&local, dim);
            let lay = qset.grad_layout();
            let width = lay.len();
            // One pass over query/training pairs: values and first-point partials.
            let mut kq = Matrix::zeros(q, n);
            let mut partials = vec![0.0; q * n * width];
            for (qi, xv) in xq.iter().enumerate() {
                let block = &mut partials[qi * n * width..(qi + 1) * n * width];
                for (j, g) in block.chunks_exact_mut(width).enumerate() {
                    kq[(qi, j)] =
                        qset.value_and_grad_first_fixed_alpha(qi, xv, &oc.train, j, cache.xs.row(j), out.rq_alpha, g);
                }
            }
            let mut beta = Matrix::zeros(q, n);
            gemm(1.0, &kq, false, &oc.k_inv, false, 0.0, &mut beta);
            let mut gm = vec![0.0; width];
            let mut gv = vec![0.0; width];
            let mut hm = vec![0.0; heads_n];
            let mut hv = vec![0.0; heads_n];
            let ys = self.target_scaler.std[o];
            for qi in 0..q {
                gm.iter_mut().for_each(|v| *v = 0.0);
                gv.iter_mut().for_each(|v| *v = 0.0);
                let b = beta.row(qi);
                let block = &partials[qi * n * width..(qi + 1) * n * width];
                for (j, p) in block.chunks_exact(width).enumerate() {
                    let (wm, wv) = (oc.alpha[j], -2.0 * b[j]);
                    for ((m, v), p) in gm.iter_mut().zip(gv.iter_mut()).zip(p) {
                        *m += wm * p;
                        *v += wv * p;
                    }
                }
                let p = &local[qi];
                gv[lay.log_s()] += p.signal_variance;
                let raw_mean = dot(kq.row(qi), &oc.alpha);
                let raw_var = p.signal_variance - dot(kq.row(qi), b);
                let (h, jh) = &fwd[qi];
                log_grad_to_heads(h, p, &gm, 0.0, &mut hm);
                log_grad_to_heads(h, p, &gv, 0.0, &mut hv);
                let floored = raw_var <= VARIANCE_FLOOR;
                let lin = &mut result[qi];
                lin.prediction.mean[o] = self.target_scaler.restore_mean(o, raw_mean);
                lin.prediction.variance[o] =
                    self.target_scaler.restore_variance(o, raw_var.max(VARIANCE_FLOOR)).max(VARIANCE_FLOOR);
                for d in 0..dim {
                    let mut dm = gm[lay.x() + d];
                    let mut dv = gv[lay.x() + d];
                    for hi in 0..heads_n {
                        dm += hm[hi] * jh[(hi, d)];
                        dv += hv[hi] * jh[(hi, d)];
                    }
                    let sx = self.input_scaler.std[d];
                    lin.mean_jacobian[(o, d)] = dm * ys / sx;
                    lin.variance_jacobian[(o, d)] = if floored { 0.0 } else { dv * ys * ys / sx };
                }
            }
        }
        result
    }
}

impl DynamicsModel for DgcnModel {
    fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    fn output_dim(&self) -> usize {
        self.targets.cols()
    }

    fn predict(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>> {
        check_queries(x, self.input_dim())?;
        Ok((0..x.rows()).map(|r| self.predict_one(x.row(r))).collect())
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
