use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::buffer::{buffer_append, collect_random, DataBuffer, Transition};
use super::config::{ExperimentConfig, ModelKind};
use crate::diffopt::{optimize, OptimConfig};
use crate::envs::{env_reset, env_step, internal_from_observation, EnvSpec, EnvState};
use crate::exec::{map_indices, Execution};
use crate::models::{dgcn_fit, epnn_fit, gp_fit, AnyModel, DynamicsModel, Linearization, PredictiveGaussian};
use crate::numerics::{sample_moments, Gaussian, Matrix, RngStream};
use crate::policy::RbfPolicy;
use crate::rollout::{PolicyObjective, Propagation, RolloutSetup, Terminate};
use crate::{Error, Result};

const EVAL_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const REPEAT_STREAM: u64 = 1000;

/// Initial states shared by every policy evaluated in one suite. They depend
/// only on the seed, never on the model or propagation choice.
pub fn eval_starts(spec: &EnvSpec, n: usize, seed: u64) -> Vec<EnvState> {
    let mut rng = RngStream::new(seed).substream(EVAL_STREAM);
    (0..n).map(|_| env_reset(spec, &mut rng)).collect()
}

/// Moment-matched Gaussian over initial observations.
pub fn initial_observation_gaussian(spec: &EnvSpec, n: usize, seed: u64) -> Result<Gaussian> {
    let mut rng = RngStream::new(seed).substream(INIT_STREAM);
    let obs: Vec<Vec<f64>> = (0..n.max(2)).map(|_| env_reset(spec, &mut rng).observation).collect();
    let (mean, cov) = sample_moments(&obs);
    Gaussian::new(mean, cov)
}

/// Runs `policy` from a start state; steps after termination score the penalty.
pub fn run_episode(spec: &EnvSpec, policy: &RbfPolicy, start: &EnvState, horizon: usize) -> Result<(Vec<Transition>, Vec<f64>)> {
    let mut state = start.clone();
    let mut transitions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = policy.action(&state.observation)?;
        let (next, done, r) = env_step(spec, &state, a)?;
        transitions.push(Transition::new(&state.observation, a, &next.observation));
        rewards.push(r);
        if done {
            rewards.resize(horizon, spec.reward.termination_penalty);
            break;
        }
        state = next;
    }
    Ok((transitions, rewards))
}

/// Average per-step reward over `starts`, each run for `eval_horizon` steps.
pub fn evaluate_policy(policy: &RbfPolicy, spec: &EnvSpec, starts: &[EnvState], eval_horizon: usize) -> Result<f64> {
    if starts.is_empty() || eval_horizon == 0 {
        return Err(Error::invalid("evaluation needs at least one start and one step"));
    }
    let mut total = 0.0;
    for s in starts {
        let (_, rewards) = run_episode(spec, policy, s, eval_horizon)?;
        total += rewards.iter().sum::<f64>();
    }
    Ok(total / (starts.len() * eval_horizon) as f64)
}

/// Average per-step reward of uniformly random actions from `starts`.
pub fn random_policy_baseline(spec: &EnvSpec, starts: &[EnvState], eval_horizon: usize, seed: u64) -> Result<f64> {
    let mut rng = RngStream::new(seed);
    let mut total = 0.0;
    for s in starts {
        let mut state = s.clone();
        for t in 0..eval_horizon {
            let (next, done, r) = env_step(spec, &state, rng.uniform(-spec.u_max, spec.u_max))?;
            total += r;
            if done {
                total += (eval_horizon - t - 1) as f64 * spec.reward.termination_penalty;
                break;
            }
            state = next;
        }
    }
    Ok(total / (starts.len() * eval_horizon) as f64)
}

/// The true environment as a deterministic dynamics model over observations,
/// with central-difference Jacobians.
#[derive(Debug, Clone)]
pub struct EnvModel {
    spec: EnvSpec,
}

impl EnvModel {
    pub fn new(spec: EnvSpec) -> EnvModel {
        EnvModel { spec }
    }

    fn delta(&self, x: &[f64]) -> Vec<f64> {
        let d = self.spec.obs_dim();
        let internal = internal_from_observation(self.spec.task, &x[..d]);
        let next = self.spec.observe(&self.spec.integrate(&internal, x[d]));
        next.iter().zip(&x[..d]).map(|(a, b)| a - b).collect()
    }
}

impl DynamicsModel for EnvModel {
    fn input_dim(&self) -> usize {
        self.spec.obs_dim() + 1
    }

    fn output_dim(&self) -> usize {
        self.spec.obs_dim()
    }

    fn predict(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>> {
        Ok((0..x.rows())
            .map(|r| PredictiveGaussian { mean: self.delta(x.row(r)), variance: vec![0.0; self.output_dim()] })
            .collect())
    }

    fn linearize(&self, x: &Matrix, exec: Execution) -> Result<Vec<Linearization>> {
        let (d_in, d_out) = (self.input_dim(), self.output_dim());
        Ok(map_indices(exec, x.rows(), |r| {
            let row = x.row(r);
            let mut jac = Matrix::zeros(d_out, d_in);
            for j in 0..d_in {
                let h = 1e-6 * row[j].abs().max(1.0);
                let mut p = row.to_vec();
                p[j] += h;
                let fp = self.delta(&p);
                p[j] -= 2.0 * h;
                let fm = self.delta(&p);
                for i in 0..d_out {
                    jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
                }
            }
            Linearization {
                prediction: PredictiveGaussian { mean: self.delta(row), variance: vec![0.0; d_out] },
                mean_jacobian: jac,
                variance_jacobian: Matrix::zeros(d_out, d_in),
            }
        }))
    }
}

/// Fits the configured model, warm-starting from `prev` where supported.
pub fn fit_model(cfg: &ExperimentConfig, buf: &DataBuffer, prev: Option<&AnyModel>, rng: &mut RngStream) -> Result<AnyModel> {
    let (x, y) = buf.to_matrices()?;
    Ok(match cfg.model {
        ModelKind::Gp => {
            let mut c = cfg.gp.clone();
            if let Some(AnyModel::Gp(m)) = prev {
                c.init = Some(m.params().to_vec());
            }
            AnyModel::Gp(gp_fit(&x, &y, &c, rng)?)
        }
        ModelKind::Dgcn => {
            let mut c = cfg.dgcn.clone();
            if let Some(AnyModel::Dgcn(m)) = prev {
                c.init = Some(m.outputs().to_vec());
            }
            AnyModel::Dgcn(dgcn_fit(&x, &y, &c, rng)?)
        }
        ModelKind::Epnn => AnyModel::Epnn(epnn_fit(&x, &y, &cfg.pnn, rng)?),
    })
}

/// Optimizes `policy` against `model` by minimizing the rollout cost.
#[allow(clippy::too_many_arguments)]
pub fn optimize_policy(
    model: &dyn DynamicsModel,
    policy: &RbfPolicy,
    spec: &EnvSpec,
    init: &Gaussian,
    horizon: usize,
    particles: usize,
    prop: Propagation,
    optim: &OptimConfig,
    exec: Execution,
    rng: &mut RngStream,
) -> Result<(RbfPolicy, f64, usize)> {
    let term = |o: &[f64]| spec.terminated_obs(o);
    let terminate: Option<Terminate> = if spec.has_termination() { Some(&term) } else { None };
    let setup = RolloutSetup { model, init, horizon, particles, reward: &spec.reward, terminate, exec };
    let noise = RngStream::new(rand::RngCore::next_u64(rng));
    let mut objective = PolicyObjective::new(setup, policy.clone(), prop, noise);
    let out = optimize(&mut objective, &policy.to_params(), optim, rng)?;
    Ok((policy.with_params(out.params.values())?, out.value, out.evaluations))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub iteration: usize,
    pub stage: String,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub samples_used: usize,
    pub eval_avg_reward: f64,
    pub planning_horizon: usize,
    pub trial_transitions: usize,
    pub policy_cost: f64,
    pub optimizer_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub model: ModelKind,
    pub propagation: Propagation,
    pub seed: u64,
    pub repeat: usize,
    pub initial_samples: usize,
    pub iterations: Vec<IterationRecord>,
    pub stage_log: Vec<StageEntry>,
    pub wall_time_s: f64,
    /// Set when a stage failed; the record then holds the iterations before it.
    pub failure: Option<String>,
}

/// A finished repeat together with its final model and policy.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Option<AnyModel>,
    pub policy: RbfPolicy,
}

/// Repeat 0 of the experiment.
pub fn train_loop(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let starts = eval_starts(&cfg.env, cfg.n_eval_starts, cfg.seed);
    Ok(train_repeat(cfg, 0, &starts)?.record)
}

/// Policy search: fit the model on all data, optimize the policy on model
/// rollouts, run one trial on the real system, append its transitions and
/// evaluate, `cfg.iterations` times.
pub fn train_repeat(cfg: &ExperimentConfig, repeat: usize, starts: &[EnvState]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let clock = Instant::now();
    let spec = &cfg.env;
    let rep = RngStream::new(cfg.seed).substream(REPEAT_STREAM + repeat as u64);
    let init = initial_observation_gaussian(spec, cfg.init_moment_samples, cfg.seed)?;
    let mut log = Vec::new();
    let mut stage = |iteration: usize, stage: &str, detail: String, t: Instant| {
        if cfg.verbose {
            eprintln!("[{} r{repeat} it{iteration}] {stage}: {detail} ({:.1} s)", cfg.stem(), t.elapsed().as_secs_f64());
        }
        log.push(StageEntry { iteration, stage: stage.to_string(), detail, seconds: t.elapsed().as_secs_f64() });
    };

    let t = Instant::now();
    let mut buf = collect_random(spec, cfg.initial_samples, cfg.buffer_cap, &mut rep.substream(0))?;
    stage(0, "collect_random", format!("{} transitions with uniform random actions", buf.len()), t);
    let t = Instant::now();
    let mut policy = RbfPolicy::init(spec.obs_dim(), cfg.n_basis, spec.u_max, &spec.obs_scale, &mut rep.substream(1))?;
    stage(0, "init_policy", format!("{} parameters", policy.param_count()), t);

    let mut iterations = Vec::with_capacity(cfg.iterations);
    let mut model: Option<AnyModel> = None;
    let mut failure = None;
    for it in 1..=cfg.iterations {
        let it_rng = rep.substream(100 + it as u64);
        let horizon = cfg.horizon_for(it);
        let step = (|| -> Result<IterationRecord> {
            let t = Instant::now();
            let fitted = fit_model(cfg, &buf, model.as_ref(), &mut it_rng.substream(0))
                .map_err(|e| Error::OptimizationFailure(format!("fit_model: {e}")))?;
            stage(it, "fit_model", format!("{} on {} transitions", cfg.model, buf.len()), t);

            let t = Instant::now();
            let (optimized, cost, evals) = optimize_policy(
                &fitted,
                &policy,
                spec,
                &init,
                horizon,
                cfg.n_particles,
                cfg.propagation,
                &cfg.policy_optim,
                cfg.exec,
                &mut it_rng.substream(1),
            )
            .map_err(|e| Error::OptimizationFailure(format!("optimize_policy: {e}")))?;
            stage(it, "optimize_policy", format!("{} rollouts, horizon {horizon}, cost {cost}, {evals} evaluations", cfg.propagation), t);

            let t = Instant::now();
            let start = env_reset(spec, &mut it_rng.substream(2));
            let (trial, _) = run_episode(spec, &optimized, &start, horizon)?;
            let n_trial = trial.len();
            stage(it, "trial", format!("{n_trial} transitions"), t);

            let t = Instant::now();
            buf = buffer_append(std::mem::take(&mut buf), trial);
            stage(it, "append_data", format!("buffer {} of {} collected", buf.len(), buf.total_appended()), t);

            let t = Instant::now();
            let reward = evaluate_policy(&optimized, spec, starts, cfg.eval_horizon)?;
            stage(it, "evaluate", format!("{} starts, horizon {}, avg reward {reward}", starts.len(), cfg.eval_horizon), t);

            policy = optimized;
            model = Some(fitted);
            Ok(IterationRecord {
                iteration: it,
                samples_used: buf.total_appended(),
                eval_avg_reward: reward,
                planning_horizon: horizon,
                trial_transitions: n_trial,
                policy_cost: cost,
                optimizer_evaluations: evals,
            })
        })();
        match step {
            Ok(r) => iterations.push(r),
            Err(e) => {
                failure = Some(format!("iteration {it}: {e}"));
                break;
            }
        }
    }
    let record = RunRecord {
        task: cfg.task.to_string(),
        model: cfg.model,
        propagation: cfg.propagation,
        seed: cfg.seed,
        repeat,
        initial_samples: cfg.initial_samples,
        iterations,
        stage_log: log,
        wall_time_s: clock.elapsed().as_secs_f64(),
        failure,
    };
    Ok(TrainOutcome { record, model, policy })
}

/// All repeats of one configuration (in parallel under the `parallel` feature).
pub fn run_suite(cfg: &ExperimentConfig) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let starts = eval_starts(&cfg.env, cfg.n_eval_starts, cfg.seed);
    map_indices(cfg.exec, cfg.repeats, |r| train_repeat(cfg, r, &starts)).into_iter().collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceOutcome {
    pub policy: RbfPolicy,
    pub eval_avg_reward: f64,
    pub cost: f64,
}

/// Policy optimized directly on the true dynamics; an upper reference for
/// what the model-based runs can reach under the same policy class.
pub fn reference_policy(cfg: &ExperimentConfig, optim: &OptimConfig) -> Result<ReferenceOutcome> {
    cfg.validate()?;
    let spec = &cfg.env;
    let starts = eval_starts(spec, cfg.n_eval_starts, cfg.seed);
    let init = initial_observation_gaussian(spec, cfg.init_moment_samples, cfg.seed)?;
    let model = EnvModel::new(spec.clone());
    let rng = RngStream::new(cfg.seed).substream(2);
    let policy = RbfPolicy::init(spec.obs_dim(), cfg.n_basis, spec.u_max, &spec.obs_scale, &mut rng.substream(0))?;
    let (policy, cost, _) = optimize_policy(
        &model,
        &policy,
        spec,
        &init,
        cfg.eval_horizon,
        cfg.n_particles,
        Propagation::Ts,
        optim,
        cfg.exec,
        &mut rng.substream(1),
    )?;
    let eval_avg_reward = evaluate_policy(&policy, spec, &starts, cfg.eval_horizon)?;
    Ok(ReferenceOutcome { policy, eval_avg_reward, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Task;

    #[test]
    fn starts_depend_only_on_seed() {
        let mut a = ExperimentConfig::preset(Task::P);
        let mut b = a.clone();
        a.model = ModelKind::Gp;
        b.propagation = Propagation::Pf;
        let sa = eval_starts(&a.env, a.n_eval_starts, a.seed);
        let sb = eval_starts(&b.env, b.n_eval_starts, b.seed);
        assert_eq!(sa.len(), 20);
        assert_eq!(sa, sb);
        assert_ne!(sa, eval_starts(&a.env, 20, 1));
    }

    #[test]
    fn evaluation_bounds_and_determinism() {
        let spec = EnvSpec::new(Task::P);
        let starts = eval_starts(&spec, 20, 0);
        let p = RbfPolicy::init(3, 10, 2.0, &[1.0, 1.0, 3.0], &mut RngStream::new(1)).unwrap();
        let a = evaluate_policy(&p, &spec, &starts, 50).unwrap();
        assert_eq!(a, evaluate_policy(&p, &spec, &starts, 50).unwrap());
        assert!(a > -1.0 && a <= 0.0);
        // A zero-action policy held at the upright equilibrium scores exactly 0.
        let zero = p.with_params(&{
            let mut v = p.to_params().values().to_vec();
            v[30..40].iter_mut().for_each(|w| *w = 0.0);
            v
        })
        .unwrap();
        let up = EnvState { internal: vec![0.0, 0.0], observation: spec.observe(&[0.0, 0.0]) };
        assert_eq!(evaluate_policy(&zero, &spec, &[up], 30).unwrap(), 0.0);
    }

    #[test]
    fn terminated_episodes_are_truncated_and_penalized() {
        let spec = EnvSpec::new(Task::Idp);
        let p = RbfPolicy::init(6, 5, spec.u_max, &spec.obs_scale, &mut RngStream::new(2)).unwrap();
        let start = EnvState { internal: vec![0.0, 0.5, 0.5, 0.0, 0.0, 0.0], observation: vec![0.0, 0.5, 0.5, 0.0, 0.0, 0.0] };
        let (tr, rewards) = run_episode(&spec, &p, &start, 200).unwrap();
        assert!(tr.len() < 200);
        assert_eq!(rewards.len(), 200);
        assert!(rewards[tr.len() - 1..].iter().all(|r| *r == -1.0));
    }

    #[test]
    fn env_model_matches_environment() {
        let spec = EnvSpec::new(Task::Ipsu);
        let m = EnvModel::new(spec.clone());
        let s = env_reset(&spec, &mut RngStream::new(3));
        let (next, _, _) = env_step(&spec, &s, 1.5).unwrap();
        let mut x = s.observation.clone();
        x.push(1.5);
        let lin = m.linearize(&Matrix::from_rows(&[x.clone()]).unwrap(), Execution::Sequential).unwrap();
        for i in 0..5 {
            assert!((s.observation[i] + lin[0].prediction.mean[i] - next.observation[i]).abs() < 1e-12);
        }
        // Jacobian against a wider central difference.
        let h = 1e-4;
        let mut xp = x.clone();
        xp[5] += h;
        let mut xm = x.clone();
        xm[5] -= h;
        let (fp, fm) = (m.delta(&xp), m.delta(&xm));
        for i in 0..5 {
            assert!((lin[0].mean_jacobian[(i, 5)] - (fp[i] - fm[i]) / (2.0 * h)).abs() < 1e-5);
        }
    }
}
