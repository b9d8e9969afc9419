//! Uncertainty propagation through a learned model under a policy.
//!
//! Trajectory sampling (TS) pushes individual particles through the model,
//! drawing each step's change from the predictive Gaussian. The particle
//! filter variant (PF) instead refits a Gaussian over the state after every
//! step from particle statistics. Both are built on the reverse-mode tape so
//! the expected cost can be differentiated with respect to the policy; the
//! sampling path is reparametrized with standard-normal draws that are fixed
//! for one evaluation.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::diffopt::{Objective, ParamVector, Tape, Var};
use crate::exec::{map_indices, Execution};
use crate::models::{DynamicsModel, Linearization, PredictiveGaussian};
use crate::numerics::{sample_moments, sample_mvn, Gaussian, Matrix, RngStream};
use crate::policy::RbfPolicy;
use crate::{Error, Result};

/// Variance at or below this is treated as exactly zero for sampling.
const VARIANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub target: Vec<f64>,
    /// Diagonal of the weight matrix.
    pub weights: Vec<f64>,
    #[serde(default = "default_shifted")]
    pub shifted: bool,
    #[serde(default = "default_penalty")]
    pub termination_penalty: f64,
}

fn default_shifted() -> bool {
    true
}

fn default_penalty() -> f64 {
    -1.0
}

impl RewardSpec {
    pub fn new(target: Vec<f64>, weights: Vec<f64>) -> RewardSpec {
        RewardSpec { target, weights, shifted: true, termination_penalty: -1.0 }
    }

    pub fn dim(&self) -> usize {
        self.target.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.target.len() != dim || self.weights.len() != dim {
            return Err(Error::invalid(format!("reward spec needs {dim} target and weight entries")));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.target.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("reward weights must be finite and nonnegative"));
        }
        if !self.termination_penalty.is_finite() {
            return Err(Error::invalid("termination penalty must be finite"));
        }
        Ok(())
    }

    /// Converts a shifted reward to the unshifted scale (and back is `- 1`).
    pub fn unshift(&self, r: f64) -> f64 {
        if self.shifted {
            r + 1.0
        } else {
            r
        }
    }
}

/// `exp(-(s - s_tar)ᵀ W (s - s_tar))`, minus one when shifted.
pub fn exponential_reward(s_next: &[f64], spec: &RewardSpec) -> f64 {
    let q: f64 = s_next
        .iter()
        .zip(&spec.target)
        .zip(&spec.weights)
        .map(|((s, t), w)| w * (s - t) * (s - t))
        .sum();
    let e = (-q).exp();
    if spec.shifted {
        e - 1.0
    } else {
        e
    }
}

/// Reward and its gradient with respect to the state (overwrites `grad`).
fn reward_and_grad(s: &[f64], spec: &RewardSpec, grad: &mut [f64]) -> f64 {
    let r = exponential_reward(s, spec);
    let e = if spec.shifted { r + 1.0 } else { r };
    for (i, g) in grad.iter_mut().enumerate() {
        *g = -2.0 * spec.weights[i] * (s[i] - spec.target[i]) * e;
    }
    r
}

/// Termination predicate over observations.
pub type Terminate<'a> = &'a (dyn Fn(&[f64]) -> bool + Sync);

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub states: Vec<Vec<f64>>,
    pub time_index: usize,
    pub alive: Vec<bool>,
}

impl ParticleSet {
    pub fn new(states: Vec<Vec<f64>>) -> Result<ParticleSet> {
        if states.is_empty() {
            return Err(Error::invalid("a particle set needs at least one particle"));
        }
        let alive = vec![true; states.len()];
        Ok(ParticleSet { states, time_index: 0, alive })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }

    /// Marks particle `q` terminated; termination is absorbing.
    pub fn kill(&mut self, q: usize) {
        self.alive[q] = false;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub expected_cost: f64,
    pub per_step_avg_reward: Vec<f64>,
    /// `trajectories[q][t]` is particle `q`'s state at time `t` (TS only).
    pub trajectories: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Propagation {
    Ts,
    Pf,
}

impl std::str::FromStr for Propagation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Propagation> {
        match s.to_ascii_lowercase().as_str() {
            "ts" => Ok(Propagation::Ts),
            "pf" => Ok(Propagation::Pf),
            other => Err(Error::invalid(format!("unknown propagation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Propagation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Propagation::Ts => "ts",
            Propagation::Pf => "pf",
        })
    }
}

/// Everything a rollout needs except the policy and the random draws.
#[derive(Clone, Copy)]
pub struct RolloutSetup<'a> {
    pub model: &'a dyn DynamicsModel,
    pub init: &'a Gaussian,
    pub horizon: usize,
    pub particles: usize,
    pub reward: &'a RewardSpec,
    pub terminate: Option<Terminate<'a>>,
    pub exec: Execution,
}

impl RolloutSetup<'_> {
    fn validate(&self, policy: &RbfPolicy) -> Result<()> {
        let d = self.init.dim();
        if self.particles == 0 {
            return Err(Error::invalid("at least one particle is required"));
        }
        if policy.state_dim() != d || self.model.input_dim() != d + 1 || self.model.output_dim() != d {
            return Err(Error::invalid(format!(
                "dimension mismatch: state {d}, policy {}, model {}→{}",
                policy.state_dim(),
                self.model.input_dim(),
                self.model.output_dim()
            )));
        }
        self.reward.validate(d)
    }
}

/// Moments of one particle-filter step (population `1/n_p` statistics).
#[derive(Debug, Clone)]
pub struct PfMoments {
    pub mean_delta: Vec<f64>,
    pub cov_delta: Matrix,
    /// Covariance between input particles (rows) and predicted means (columns).
    pub cross: Matrix,
    /// Covariance of the input particles.
    pub input_cov: Matrix,
}

/// Mean change, change covariance and input–change covariance from the
/// model's predictions at `particles`.
pub fn pf_moments(model: &dyn DynamicsModel, policy: &RbfPolicy, particles: &[Vec<f64>]) -> Result<PfMoments> {
    let preds = predict_particles(model, policy, particles)?;
    Ok(moments_from_predictions(particles, &preds))
}

fn predict_particles(model: &dyn DynamicsModel, policy: &RbfPolicy, particles: &[Vec<f64>]) -> Result<Vec<PredictiveGaussian>> {
    let d = policy.state_dim();
    let mut x = Matrix::zeros(particles.len(), d + 1);
    for (q, s) in particles.iter().enumerate() {
        let row = x.row_mut(q);
        row[..d].copy_from_slice(s);
        row[d] = policy.action(s)?;
    }
    model.predict(&x)
}

fn moments_from_predictions(particles: &[Vec<f64>], preds: &[PredictiveGaussian]) -> PfMoments {
    let n = particles.len() as f64;
    let d = preds[0].mean.len();
    let means: Vec<Vec<f64>> = preds.iter().map(|p| p.mean.clone()).collect();
    let (mean_delta, mut cov_delta) = sample_moments(&means);
    for p in preds {
        for i in 0..d {
            cov_delta[(i, i)] += p.variance[i] / n;
        }
    }
    let (s_mean, input_cov) = sample_moments(particles);
    let ds = particles[0].len();
    let mut cross = Matrix::zeros(ds, d);
    for (s, m) in particles.iter().zip(&means) {
        for i in 0..ds {
            for j in 0..d {
                cross[(i, j)] += (s[i] - s_mean[i]) * (m[j] - mean_delta[j]) / n;
            }
        }
    }
    PfMoments { mean_delta, cov_delta, cross, input_cov }
}

/// One particle-filter step: sample, predict, refit a Gaussian over `s + Δ`.
/// The input covariance in the update is the particles' own, so the result is
/// the sample covariance of `s + μ(s)` plus the mean predictive variance.
pub fn pf_step(
    model: &dyn DynamicsModel,
    policy: &RbfPolicy,
    dist: &Gaussian,
    n_p: usize,
    rng: &mut RngStream,
) -> Result<Gaussian> {
    if n_p == 0 {
        return Err(Error::invalid("at least one particle is required"));
    }
    let particles = sample_mvn(dist, n_p, rng)?;
    let m = pf_moments(model, policy, &particles)?;
    next_gaussian(dist, &m)
}

fn next_gaussian(dist: &Gaussian, m: &PfMoments) -> Result<Gaussian> {
    let d = dist.dim();
    let mean: Vec<f64> = dist.mean().iter().zip(&m.mean_delta).map(|(a, b)| a + b).collect();
    let cov = Matrix::from_fn(d, d, |i, j| {
        m.input_cov[(i, j)] + m.cov_delta[(i, j)] + m.cross[(i, j)] + m.cross[(j, i)]
    });
    Gaussian::new(mean, cov).map_err(|e| Error::numerical(format!("propagated covariance: {e}")))
}

/// Particle-filter rollout; rewards use fresh particles from each step's Gaussian.
#[allow(clippy::too_many_arguments)]
pub fn pf_rollout(
    model: &dyn DynamicsModel,
    policy: &RbfPolicy,
    init: &Gaussian,
    horizon: usize,
    n_p: usize,
    spec: &RewardSpec,
    rng: &mut RngStream,
) -> Result<RolloutResult> {
    let setup = RolloutSetup { model, init, horizon, particles: n_p, reward: spec, terminate: None, exec: Execution::default() };
    let base = RngStream::new(rng.next_u64());
    rollout_value(&setup, policy, Propagation::Pf, &base, false)
}

/// Trajectory-sampling rollout. A particle whose next state satisfies
/// `terminate` receives the termination penalty for that and all remaining
/// steps.
#[allow(clippy::too_many_arguments)]
pub fn ts_rollout(
    model: &dyn DynamicsModel,
    policy: &RbfPolicy,
    init: &Gaussian,
    horizon: usize,
    n_p: usize,
    spec: &RewardSpec,
    rng: &mut RngStream,
    terminate: Option<Terminate<'_>>,
) -> Result<RolloutResult> {
    let setup = RolloutSetup { model, init, horizon, particles: n_p, reward: spec, terminate, exec: Execution::default() };
    let base = RngStream::new(rng.next_u64());
    rollout_value(&setup, policy, Propagation::Ts, &base, false)
}

/// Expected cost without gradients. `noise` fixes all draws.
pub fn rollout_value(
    setup: &RolloutSetup<'_>,
    policy: &RbfPolicy,
    prop: Propagation,
    noise: &RngStream,
    record: bool,
) -> Result<RolloutResult> {
    setup.validate(policy)?;
    let tape = Tape::new();
    let out = match prop {
        Propagation::Ts => ts_tape(&tape, setup, policy, None, noise, record)?,
        Propagation::Pf => pf_tape(&tape, setup, policy, None, noise)?,
    };
    Ok(out.result)
}

/// Expected cost and its gradient with respect to the policy's flat parameters.
pub fn rollout_value_and_grad(
    setup: &RolloutSetup<'_>,
    policy: &RbfPolicy,
    prop: Propagation,
    noise: &RngStream,
) -> Result<(RolloutResult, Vec<f64>)> {
    setup.validate(policy)?;
    let params = policy.to_params();
    let tape = Tape::new();
    let theta = tape.vars(params.values());
    let out = match prop {
        Propagation::Ts => ts_tape(&tape, setup, policy, Some(&theta), noise, false)?,
        Propagation::Pf => pf_tape(&tape, setup, policy, Some(&theta), noise)?,
    };
    let adj = tape.backward(out.cost);
    Ok((out.result, adj.wrt_all(&theta)))
}

struct TapeRollout<'t> {
    cost: Var<'t>,
    result: RolloutResult,
}

/// Policy actions as tape nodes depending on `theta` and the states.
fn tape_actions<'t>(
    tape: &'t Tape,
    policy: &RbfPolicy,
    theta: Option<&[Var<'t>]>,
    states: &[&[Var<'t>]],
    exec: Execution,
) -> Result<Vec<Var<'t>>> {
    let d = policy.state_dim();
    let np = policy.param_count();
    let values: Vec<Vec<f64>> = states.iter().map(|s| s.iter().map(|v| v.value()).collect()).collect();
    let Some(theta) = theta else {
        return values.iter().map(|s| policy.action(s).map(|a| tape.var(a))).collect();
    };
    let grads = map_indices(exec, values.len(), |q| {
        let mut gp = vec![0.0; np + d];
        let (a, b) = gp.split_at_mut(np);
        policy.action_and_grad(&values[q], a, b).map(|u| (u, gp))
    });
    let mut parents: Vec<Var<'t>> = Vec::with_capacity(np + d);
    let mut out = Vec::with_capacity(states.len());
    for (q, g) in grads.into_iter().enumerate() {
        let (u, partials) = g?;
        parents.clear();
        parents.extend_from_slice(theta);
        parents.extend_from_slice(states[q]);
        out.push(tape.custom(&parents, u, &partials));
    }
    Ok(out)
}

/// Model predictions (with Jacobians when differentiating) at `[s ‖ a]`.
fn model_at(setup: &RolloutSetup<'_>, inputs: &[Vec<f64>], grad: bool) -> Result<Vec<Linearization>> {
    let x = Matrix::from_rows(inputs)?;
    if grad {
        return setup.model.linearize(&x, setup.exec);
    }
    let (n_out, n_in) = (setup.model.output_dim(), x.cols());
    Ok(setup
        .model
        .predict(&x)?
        .into_iter()
        .map(|prediction| Linearization {
            prediction,
            mean_jacobian: Matrix::zeros(n_out, n_in),
            variance_jacobian: Matrix::zeros(n_out, n_in),
        })
        .collect())
}

fn check_prediction(lin: &Linearization) -> Result<()> {
    let p = &lin.prediction;
    if p.mean.iter().chain(&p.variance).any(|v| !v.is_finite()) || p.variance.iter().any(|v| *v < 0.0) {
        return Err(Error::numerical("model returned a non-finite or negative prediction"));
    }
    Ok(())
}

/// Reward node at state `s`.
fn tape_reward<'t>(tape: &'t Tape, s: &[Var<'t>], spec: &RewardSpec) -> Var<'t> {
    let vals: Vec<f64> = s.iter().map(|v| v.value()).collect();
    let mut g = vec![0.0; vals.len()];
    let r = reward_and_grad(&vals, spec, &mut g);
    tape.custom(s, r, &g)
}

fn ts_tape<'t>(
    tape: &'t Tape,
    setup: &RolloutSetup<'_>,
    policy: &RbfPolicy,
    theta: Option<&[Var<'t>]>,
    noise: &RngStream,
    record: bool,
) -> Result<TapeRollout<'t>> {
    let d = setup.init.dim();
    let n = setup.particles;
    let horizon = setup.horizon;
    let grad = theta.is_some();
    let l0 = setup.init.factor()?;
    let draws: Vec<Vec<f64>> = (0..n).map(|q| noise.substream(q as u64).normals(d * (horizon + 1))).collect();

    let mut states: Vec<Vec<Var<'t>>> = draws
        .iter()
        .map(|z| {
            let s0 = (0..d).map(|i| setup.init.mean()[i] + (0..=i).map(|k| l0[(i, k)] * z[k]).sum::<f64>());
            s0.map(|v| tape.var(v)).collect()
        })
        .collect();
    let mut particles = ParticleSet::new(states.iter().map(|s| s.iter().map(|v| v.value()).collect()).collect())?;
    let mut trajectories = record.then(|| particles.states.iter().map(|s| vec![s.clone()]).collect::<Vec<_>>());
    if let Some(term) = setup.terminate {
        for q in 0..n {
            if term(&particles.states[q]) {
                particles.kill(q);
            }
        }
    }

    let mut step_rewards = Vec::with_capacity(horizon);
    let mut reward_nodes = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let alive: Vec<usize> = (0..n).filter(|&q| particles.alive[q]).collect();
        let dead = (n - alive.len()) as f64;
        let mut rewards: Vec<Var<'t>> = Vec::with_capacity(alive.len());
        if !alive.is_empty() {
            let state_refs: Vec<&[Var<'t>]> = alive.iter().map(|&q| states[q].as_slice()).collect();
            let actions = tape_actions(tape, policy, theta, &state_refs, setup.exec)?;
            let inputs: Vec<Vec<f64>> = alive
                .iter()
                .zip(&actions)
                .map(|(&q, a)| {
                    let mut x = particles.states[q].clone();
                    x.push(a.value());
                    x
                })
                .collect();
            let lins = model_at(setup, &inputs, grad)?;
            let mut parents: Vec<Var<'t>> = Vec::with_capacity(d + 1);
            let mut partials = vec![0.0; d + 1];
            for ((k, &q), lin) in alive.iter().enumerate().zip(&lins) {
                check_prediction(lin)?;
                parents.clear();
                parents.extend_from_slice(&states[q]);
                parents.push(actions[k]);
                let eps = &draws[q][d * (t + 1)..d * (t + 2)];
                let mut next = Vec::with_capacity(d);
                for i in 0..d {
                    let mu = lin.prediction.mean[i];
                    let v = lin.prediction.variance[i];
                    let sd = if v > VARIANCE_EPS { v.sqrt() } else { 0.0 };
                    let value = parents[i].value() + mu + sd * eps[i];
                    if grad {
                        let vscale = if sd > 0.0 { eps[i] / (2.0 * sd) } else { 0.0 };
                        for j in 0..=d {
                            partials[j] = lin.mean_jacobian[(i, j)] + vscale * lin.variance_jacobian[(i, j)];
                        }
                        partials[i] += 1.0;
                        next.push(tape.custom(&parents, value, &partials));
                    } else {
                        next.push(tape.var(value));
                    }
                }
                let vals: Vec<f64> = next.iter().map(|v| v.value()).collect();
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical(format!("particle {q} diverged at step {t}")));
                }
                if setup.terminate.is_some_and(|term| term(&vals)) {
                    particles.kill(q);
                } else {
                    rewards.push(tape_reward(tape, &next, setup.reward));
                }
                particles.states[q] = vals;
                states[q] = next;
            }
        }
        let dead_after = (n - particles.alive_count()) as f64;
        let _ = dead;
        let sum = tape.sum(&rewards);
        let r_t = (sum + dead_after * setup.reward.termination_penalty) / n as f64;
        step_rewards.push(r_t.value());
        reward_nodes.push(r_t);
        particles.time_index = t + 1;
        if let Some(tr) = trajectories.as_mut() {
            for (q, s) in particles.states.iter().enumerate() {
                tr[q].push(s.clone());
            }
        }
    }
    let cost = -tape.sum(&reward_nodes);
    Ok(TapeRollout {
        cost,
        result: RolloutResult { expected_cost: cost.value(), per_step_avg_reward: step_rewards, trajectories },
    })
}

/// Cholesky on the tape, with a small diagonal jitter so the square roots
/// stay differentiable for (near-)degenerate covariances.
fn tape_cholesky<'t>(tape: &'t Tape, cov: &[Vec<Var<'t>>]) -> Result<Vec<Vec<Var<'t>>>> {
    let d = cov.len();
    let max_diag = (0..d).map(|i| cov[i][i].value().abs()).fold(0.0, f64::max);
    let jitter = 1e-9 * max_diag + 1e-12;
    let zero = tape.var(0.0);
    let mut l = vec![vec![zero; d]; d];
    for j in 0..d {
        let mut acc = cov[j][j] + jitter;
        for k in 0..j {
            acc = acc - l[j][k].square();
        }
        if !(acc.value() > 0.0) {
            return Err(Error::numerical(format!("propagated covariance is not positive definite (pivot {j})")));
        }
        l[j][j] = acc.sqrt();
        for i in j + 1..d {
            let mut acc = cov[i][j];
            for k in 0..j {
                acc = acc - l[i][k] * l[j][k];
            }
            l[i][j] = acc / l[j][j];
        }
    }
    Ok(l)
}

/// `mean + L z` on the tape.
fn tape_sample<'t>(tape: &'t Tape, mean: &[Var<'t>], l: &[Vec<Var<'t>>], z: &[f64]) -> Vec<Var<'t>> {
    let d = mean.len();
    let mut parents = Vec::with_capacity(d + 1);
    let mut partials = Vec::with_capacity(d + 1);
    (0..d)
        .map(|i| {
            parents.clear();
            partials.clear();
            parents.push(mean[i]);
            partials.push(1.0);
            let mut value = mean[i].value();
            for k in 0..=i {
                parents.push(l[i][k]);
                partials.push(z[k]);
                value += l[i][k].value() * z[k];
            }
            tape.custom(&parents, value, &partials)
        })
        .collect()
}

fn pf_tape<'t>(
    tape: &'t Tape,
    setup: &RolloutSetup<'_>,
    policy: &RbfPolicy,
    theta: Option<&[Var<'t>]>,
    noise: &RngStream,
) -> Result<TapeRollout<'t>> {
    let d = setup.init.dim();
    let n = setup.particles;
    let nf = n as f64;
    let grad = theta.is_some();
    if n < 2 && setup.horizon > 0 {
        return Err(Error::invalid("particle propagation needs at least two particles"));
    }
    let mut mean: Vec<Var<'t>> = tape.vars(setup.init.mean());
    let mut cov: Vec<Vec<Var<'t>>> = (0..d).map(|i| tape.vars(setup.init.covariance().row(i))).collect();
    let mut chol = if setup.init.covariance().max_abs() == 0.0 {
        vec![vec![tape.var(0.0); d]; d]
    } else {
        tape_cholesky(tape, &cov)?
    };

    let mut step_rewards = Vec::with_capacity(setup.horizon);
    let mut reward_nodes = Vec::with_capacity(setup.horizon);
    for t in 0..setup.horizon {
        let mut rng = noise.substream(t as u64);
        let z = rng.normals(n * d);
        let z_fresh = rng.normals(n * d);

        let particles: Vec<Vec<Var<'t>>> = (0..n).map(|q| tape_sample(tape, &mean, &chol, &z[q * d..(q + 1) * d])).collect();
        let refs: Vec<&[Var<'t>]> = particles.iter().map(Vec::as_slice).collect();
        let actions = tape_actions(tape, policy, theta, &refs, setup.exec)?;
        let inputs: Vec<Vec<f64>> = particles
            .iter()
            .zip(&actions)
            .map(|(s, a)| s.iter().map(|v| v.value()).chain([a.value()]).collect())
            .collect();
        let lins = model_at(setup, &inputs, grad)?;

        // Per-particle predicted means and variances as tape nodes.
        let mut mus: Vec<Vec<Var<'t>>> = Vec::with_capacity(n);
        let mut vars: Vec<Vec<Var<'t>>> = Vec::with_capacity(n);
        let mut parents = Vec::with_capacity(d + 1);
        for (q, lin) in lins.iter().enumerate() {
            check_prediction(lin)?;
            parents.clear();
            parents.extend_from_slice(&particles[q]);
            parents.push(actions[q]);
            let node = |value: f64, jac: &Matrix, i: usize| {
                if grad {
                    tape.custom(&parents, value, jac.row(i))
                } else {
                    tape.var(value)
                }
            };
            mus.push((0..d).map(|i| node(lin.prediction.mean[i], &lin.mean_jacobian, i)).collect());
            vars.push((0..d).map(|i| node(lin.prediction.variance[i], &lin.variance_jacobian, i)).collect());
        }

        let mu_bar: Vec<f64> = (0..d).map(|i| mus.iter().map(|m| m[i].value()).sum::<f64>() / nf).collect();
        let s_bar: Vec<f64> = (0..d).map(|i| particles.iter().map(|s| s[i].value()).sum::<f64>() / nf).collect();
        let dm = |q: usize, i: usize| mus[q][i].value() - mu_bar[i];
        let ds = |q: usize, i: usize| particles[q][i].value() - s_bar[i];

        let col = |q_vars: &Vec<Vec<Var<'t>>>, i: usize| q_vars.iter().map(|m| m[i]).collect::<Vec<_>>();
        let mean_delta: Vec<Var<'t>> = (0..d).map(|i| tape.dot(&col(&mus, i), &vec![1.0 / nf; n])).collect();

        // Σ(Δ)_ij = (1/n)Σ_q v_i δ_ij + (1/n)Σ_q (μ_i − μ̄_i)(μ_j − μ̄_j);
        // C_ij = (1/n)Σ_q (s_i − s̄_i)(μ_j − μ̄_j); the input covariance is the
        // particles' sample covariance.
        let mut next_cov: Vec<Vec<Var<'t>>> = vec![Vec::with_capacity(d); d];
        let mut p = Vec::with_capacity(4 * n);
        let mut g = Vec::with_capacity(4 * n);
        for i in 0..d {
            for j in 0..d {
                if j < i {
                    let sym = next_cov[j][i];
                    next_cov[i].push(sym);
                    continue;
                }
                p.clear();
                g.clear();
                let mut value = 0.0;
                for q in 0..n {
                    let (ei, ej) = (dm(q, i) + ds(q, i), dm(q, j) + ds(q, j));
                    value += ei * ej / nf;
                    // ∂/∂μ and ∂/∂s for components i and j (summed when i == j).
                    p.push(mus[q][i]);
                    g.push(ej / nf);
                    p.push(mus[q][j]);
                    g.push(ei / nf);
                    p.push(particles[q][i]);
                    g.push(ej / nf);
                    p.push(particles[q][j]);
                    g.push(ei / nf);
                    if i == j {
                        value += vars[q][i].value() / nf;
                        p.push(vars[q][i]);
                        g.push(1.0 / nf);
                    }
                }
                next_cov[i].push(tape.custom(&p, value, &g));
            }
        }
        mean = mean.iter().zip(&mean_delta).map(|(a, b)| *a + *b).collect();
        cov = next_cov;
        chol = tape_cholesky(tape, &cov)?;

        let rewards: Vec<Var<'t>> = (0..n)
            .map(|q| {
                let s = tape_sample(tape, &mean, &chol, &z_fresh[q * d..(q + 1) * d]);
                tape_reward(tape, &s, setup.reward)
            })
            .collect();
        let r_t = tape.sum(&rewards) / nf;
        step_rewards.push(r_t.value());
        reward_nodes.push(r_t);
    }
    let cost = -tape.sum(&reward_nodes);
    Ok(TapeRollout {
        cost,
        result: RolloutResult { expected_cost: cost.value(), per_step_avg_reward: step_rewards, trajectories: None },
    })
}

/// Expected rollout cost as an optimizer objective over policy parameters.
/// Every evaluation draws fresh noise from the next substream.
pub struct PolicyObjective<'a> {
    setup: RolloutSetup<'a>,
    template: RbfPolicy,
    prop: Propagation,
    rng: RngStream,
    calls: u64,
}

impl<'a> PolicyObjective<'a> {
    pub fn new(setup: RolloutSetup<'a>, template: RbfPolicy, prop: Propagation, rng: RngStream) -> PolicyObjective<'a> {
        PolicyObjective { setup, template, prop, rng, calls: 0 }
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }
}

impl Objective for PolicyObjective<'_> {
    fn evaluate(&mut self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let policy = self.template.with_params(params.values())?;
        let noise = self.rng.substream(self.calls);
        self.calls += 1;
        let (r, g) = rollout_value_and_grad(&self.setup, &policy, self.prop, &noise)?;
        Ok((r.expected_cost, g))
    }
}
