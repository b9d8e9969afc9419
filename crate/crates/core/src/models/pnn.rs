use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use super::{check_queries, check_training_data, DynamicsModel, Linearization, PredictiveGaussian, Standardizer};
use crate::diffopt::{optimize, sigmoid, softplus, Objective, OptimConfig, ParamVector};
use crate::exec::{map_indices, Execution};
use crate::numerics::{Matrix, RngStream};
use crate::{Error, Result};

/// Added to `softplus(raw)` to keep predicted variances positive.
pub const PNN_VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PnnFitConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Members of an ensemble fit.
    pub ensemble_size: usize,
    #[serde(default)]
    pub exec: Execution,
}

impl Default for PnnFitConfig {
    fn default() -> Self {
        PnnFitConfig {
            hidden: vec![200, 200, 200],
            activation: Activation::Swish,
            weight_decay: 1e-4,
            batch_size: 64,
            optim: OptimConfig {
                learning_rate: 1e-3,
                max_steps: 2000,
                patience: usize::MAX,
                keep_last: true,
                ..OptimConfig::default()
            },
            ensemble_size: 5,
            exec: Execution::default(),
        }
    }
}

/// Network with a mean head and a raw-variance head per output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PnnModel {
    net: Mlp,
    nn_weights: Vec<f64>,
    weight_decay: f64,
    input_scaler: Standardizer,
    target_scaler: Standardizer,
}

/// Plain average of member predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpnnModel {
    members: Vec<PnnModel>,
}

/// Loss on standardized data and its gradient.
fn loss_and_grad(net: &Mlp, w: &[f64], decay: f64, xs: &Matrix, ys: &Matrix) -> (f64, Vec<f64>) {
    let (n, out) = (xs.rows(), ys.cols());
    let cache = net.forward_batch(w, xs);
    let h = cache.output();
    let scale = 1.0 / (n * out) as f64;
    let mut loss = 0.0;
    let mut d = Matrix::zeros(n, 2 * out);
    for r in 0..n {
        let (hr, yr) = (h.row(r), ys.row(r));
        for o in 0..out {
            let raw = hr[out + o];
            let var = softplus(raw) + PNN_VARIANCE_FLOOR;
            let e = hr[o] - yr[o];
            loss += e * e / var + var.ln();
            d[(r, o)] = scale * 2.0 * e / var;
            d[(r, out + o)] = scale * (-e * e / (var * var) + 1.0 / var) * sigmoid(raw);
        }
    }
    let mut grad = vec![0.0; w.len()];
    net.backward_batch(w, &cache, &d, &mut grad);
    net.add_weight_decay_grad(w, decay, &mut grad);
    (loss * scale + decay * net.weight_sq_norm(w), grad)
}

struct MiniBatch<'a> {
    net: &'a Mlp,
    decay: f64,
    xs: &'a Matrix,
    ys: &'a Matrix,
    batch: usize,
    rng: RngStream,
}

impl Objective for MiniBatch<'_> {
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let n = self.xs.rows();
        if self.batch >= n {
            return Ok(loss_and_grad(self.net, params.values(), self.decay, self.xs, self.ys));
        }
        let idx = self.rng.sample_indices(n, self.batch);
        let xb = Matrix::from_fn(idx.len(), self.xs.cols(), |r, c| self.xs[(idx[r], c)]);
        let yb = Matrix::from_fn(idx.len(), self.ys.cols(), |r, c| self.ys[(idx[r], c)]);
        Ok(loss_and_grad(self.net, params.values(), self.decay, &xb, &yb))
    }
}

pub fn pnn_fit(inputs: &Matrix, targets: &Matrix, cfg: &PnnFitConfig, rng: &mut RngStream) -> Result<PnnModel> {
    check_training_data(inputs, targets)?;
    if !(cfg.weight_decay >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::invalid("weight decay must be nonnegative and batch size positive"));
    }
    let net = Mlp::new(inputs.cols(), &cfg.hidden, 2 * targets.cols(), cfg.activation);
    let input_scaler = Standardizer::fit(inputs);
    let target_scaler = Standardizer::fit(targets);
    let xs = input_scaler.apply(inputs);
    let ys = target_scaler.apply(targets);
    let mut stream = RngStream::new(rng.next_u64());
    let init = net.init(&mut stream, 0.1);
    let pv = ParamVector::new().with_segment("nn_weights", init, 0.1);
    let mut obj = MiniBatch { net: &net, decay: cfg.weight_decay, xs: &xs, ys: &ys, batch: cfg.batch_size, rng: stream.substream(1) };
    let out = optimize(&mut obj, &pv, &cfg.optim, &mut stream)?;
    Ok(PnnModel {
        net,
        nn_weights: out.params.values().to_vec(),
        weight_decay: cfg.weight_decay,
        input_scaler,
        target_scaler,
    })
}

/// Fit `cfg.ensemble_size` members that differ in initialization and batch order.
pub fn epnn_fit(inputs: &Matrix, targets: &Matrix, cfg: &PnnFitConfig, rng: &mut RngStream) -> Result<EpnnModel> {
    if cfg.ensemble_size == 0 {
        return Err(Error::invalid("ensemble needs at least one member"));
    }
    let base = RngStream::new(rng.next_u64());
    let members = map_indices(cfg.exec, cfg.ensemble_size, |m| {
        pnn_fit(inputs, targets, cfg, &mut base.substream(m as u64))
    });
    EpnnModel::new(members.into_iter().collect::<Result<Vec<_>>>()?)
}

impl PnnModel {
    /// Model without standardization, e.g. for checking the loss directly.
    pub fn from_params(net: Mlp, nn_weights: Vec<f64>, weight_decay: f64) -> Result<PnnModel> {
        if nn_weights.len() != net.param_count() || net.output_dim() % 2 != 0 {
            return Err(Error::invalid("weights do not match the network"));
        }
        let (di, dt) = (net.input_dim(), net.output_dim() / 2);
        Ok(PnnModel {
            net,
            nn_weights,
            weight_decay,
            input_scaler: Standardizer::identity(di),
            target_scaler: Standardizer::identity(dt),
        })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn weights(&self) -> &[f64] {
        &self.nn_weights
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn weight_sq_norm(&self) -> f64 {
        self.net.weight_sq_norm(&self.nn_weights)
    }

    /// Mean over samples and outputs of `(μ - f)²/σ + ln σ`, plus weight decay,
    /// on the model's standardized scale.
    pub fn loss(&self, inputs: &Matrix, targets: &Matrix) -> Result<f64> {
        Ok(self.loss_and_grad(inputs, targets)?.0)
    }

    /// [`PnnModel::loss`] and its gradient with respect to the network weights.
    pub fn loss_and_grad(&self, inputs: &Matrix, targets: &Matrix) -> Result<(f64, Vec<f64>)> {
        if inputs.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        check_queries(inputs, self.input_dim())?;
        if targets.rows() != inputs.rows() || targets.cols() != self.output_dim() {
            return Err(Error::invalid("target shape mismatch"));
        }
        let xs = self.input_scaler.apply(inputs);
        let ys = self.target_scaler.apply(targets);
        Ok(loss_and_grad(&self.net, &self.nn_weights, self.weight_decay, &xs, &ys))
    }

    fn predict_one(&self, x: &[f64]) -> PredictiveGaussian {
        let out = self.output_dim();
        let h = self.net.forward(&self.nn_weights, &self.input_scaler.apply_row(x));
        PredictiveGaussian {
            mean: (0..out).map(|o| self.target_scaler.restore_mean(o, h[o])).collect(),
            variance: (0..out)
                .map(|o| self.target_scaler.restore_variance(o, softplus(h[out + o]) + PNN_VARIANCE_FLOOR))
                .collect(),
        }
    }

    fn linearize_one(&self, x: &[f64]) -> Linearization {
        let (out, d) = (self.output_dim(), self.input_dim());
        let (h, j) = self.net.forward_jacobian(&self.nn_weights, &self.input_scaler.apply_row(x));
        let mut lin = Linearization {
            prediction: PredictiveGaussian { mean: vec![0.0; out], variance: vec![0.0; out] },
            mean_jacobian: Matrix::zeros(out, d),
            variance_jacobian: Matrix::zeros(out, d),
        };
        for o in 0..out {
            let ys = self.target_scaler.std[o];
            lin.prediction.mean[o] = self.target_scaler.restore_mean(o, h[o]);
            lin.prediction.variance[o] = self.target_scaler.restore_variance(o, softplus(h[out + o]) + PNN_VARIANCE_FLOOR);
            let sg = sigmoid(h[out + o]);
            for dd in 0..d {
                let sx = self.input_scaler.std[dd];
                lin.mean_jacobian[(o, dd)] = j[(o, dd)] * ys / sx;
                lin.variance_jacobian[(o, dd)] = sg * j[(out + o, dd)] * ys * ys / sx;
            }
        }
        lin
    }
}

impl DynamicsModel for PnnModel {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    fn predict(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>> {
        check_queries(x, self.input_dim())?;
        Ok((0..x.rows()).map(|r| self.predict_one(x.row(r))).collect())
    }

    fn linearize(&self, x: &Matrix, exec: Execution) -> Result<Vec<Linearization>> {
        check_queries(x, self.input_dim())?;
        Ok(map_indices(exec, x.rows(), |r| self.linearize_one(x.row(r))))
    }
}

impl EpnnModel {
    pub fn new(members: Vec<PnnModel>) -> Result<EpnnModel> {
        let first = members.first().ok_or_else(|| Error::invalid("ensemble needs at least one member"))?;
        if members.iter().any(|m| m.net != first.net) {
            return Err(Error::invalid("ensemble members must share an architecture"));
        }
        Ok(EpnnModel { members })
    }

    pub fn members(&self) -> &[PnnModel] {
        &self.members
    }
}

impl DynamicsModel for EpnnModel {
    fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    fn output_dim(&self) -> usize {
        self.members[0].output_dim()
    }

    fn predict(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>> {
        let m = self.members.len() as f64;
        let mut acc = self.members[0].predict(x)?;
        for member in &self.members[1..] {
            for (a, p) in acc.iter_mut().zip(member.predict(x)?) {
                a.mean.iter_mut().zip(&p.mean).for_each(|(s, v)| *s += v);
                a.variance.iter_mut().zip(&p.variance).for_each(|(s, v)| *s += v);
            }
        }
        for a in &mut acc {
            a.mean.iter_mut().for_each(|v| *v /= m);
            a.variance.iter_mut().for_each(|v| *v /= m);
        }
        Ok(acc)
    }

    fn linearize(&self, x: &Matrix, exec: Execution) -> Result<Vec<Linearization>> {
        let m = self.members.len() as f64;
        let mut acc = self.members[0].linearize(x, exec)?;
        for member in &self.members[1..] {
            for (a, l) in acc.iter_mut().zip(member.linearize(x, exec)?) {
                a.prediction.mean.iter_mut().zip(&l.prediction.mean).for_each(|(s, v)| *s += v);
                a.prediction.variance.iter_mut().zip(&l.prediction.variance).for_each(|(s, v)| *s += v);
                a.mean_jacobian = a.mean_jacobian.add(&l.mean_jacobian);
                a.variance_jacobian = a.variance_jacobian.add(&l.variance_jacobian);
            }
        }
        for a in &mut acc {
            a.prediction.mean.iter_mut().for_each(|v| *v /= m);
            a.prediction.variance.iter_mut().for_each(|v| *v /= m);
            a.mean_jacobian = a.mean_jacobian.scaled(1.0 / m);
            a.variance_jacobian = a.variance_jacobian.scaled(1.0 / m);
        }
        Ok(acc)
    }
}
