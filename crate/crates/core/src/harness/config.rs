use serde::{Deserialize, Serialize};

use crate::diffopt::OptimConfig;
use crate::envs::{EnvSpec, Task};
use crate::exec::Execution;
use crate::models::{DgcnFitConfig, GpFitConfig, PnnFitConfig};
use crate::rollout::Propagation;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gp,
    Dgcn,
    Epnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gp => "gp",
            ModelKind::Dgcn => "dgcn",
            ModelKind::Epnn => "epnn",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ModelKind> {
        match s.to_ascii_lowercase().as_str() {
            "gp" => Ok(ModelKind::Gp),
            "dgcn" => Ok(ModelKind::Dgcn),
            "epnn" => Ok(ModelKind::Epnn),
            other => Err(Error::invalid(format!("unknown model {other:?}"))),
        }
    }
}

/// Longer planning horizon from a given iteration on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtendedHorizon {
    /// Iterations `1..=after_iteration` use the base horizon.
    pub after_iteration: usize,
    pub horizon: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    pub propagation: Propagation,
    pub iterations: usize,
    pub learning_horizon: usize,
    #[serde(default)]
    pub extended_horizon: Option<ExtendedHorizon>,
    pub eval_horizon: usize,
    pub n_basis: usize,
    pub n_particles: usize,
    pub initial_samples: usize,
    /// Keep only the latest transitions; unlimited when unset.
    #[serde(default)]
    pub buffer_cap: Option<usize>,
    pub n_eval_starts: usize,
    pub repeats: usize,
    pub seed: u64,
    pub policy_optim: OptimConfig,
    /// Samples used to moment-match the initial observation distribution.
    pub init_moment_samples: usize,
    pub env: EnvSpec,
    pub gp: GpFitConfig,
    pub dgcn: DgcnFitConfig,
    pub pnn: PnnFitConfig,
    #[serde(default)]
    pub exec: Execution,
    /// Print each stage of the loop to stderr as it finishes.
    #[serde(default)]
    pub verbose: bool,
}

pub const DEFAULT_BUFFER_CAP: usize = 800;

impl ExperimentConfig {
    /// Experimental setup of the benchmark table for `task`.
    pub fn preset(task: Task) -> ExperimentConfig {
        let (learning_horizon, extended, eval_horizon, n_basis, n_particles, iterations, initial, cap) = match task {
            Task::Cmc => (50, None, 50, 35, 100, 15, 50, None),
            Task::P => (50, None, 50, 35, 100, 15, 50, None),
            Task::Idp => (50, None, 200, 40, 100, 15, 54, None),
            Task::Ipsu => (
                80,
                Some(ExtendedHorizon { after_iteration: 6, horizon: 110 }),
                200,
                100,
                50,
                30,
                80,
                Some(DEFAULT_BUFFER_CAP),
            ),
        };
        let mut gp = GpFitConfig::default();
        gp.optim.max_steps = 150;
        ExperimentConfig {
            task,
            model: ModelKind::Dgcn,
            propagation: Propagation::Ts,
            iterations,
            learning_horizon,
            extended_horizon: extended,
            eval_horizon,
            n_basis,
            n_particles,
            initial_samples: initial,
            buffer_cap: cap,
            n_eval_starts: 20,
            repeats: 5,
            seed: 0,
            policy_optim: OptimConfig {
                learning_rate: 0.05,
                max_steps: 500,
                restarts: 3,
                patience: 30,
                rel_improvement: 1e-4,
                ..OptimConfig::default()
            },
            init_moment_samples: 10_000,
            env: EnvSpec::new(task),
            gp,
            dgcn: DgcnFitConfig::default(),
            pnn: PnnFitConfig::default(),
            exec: Execution::default(),
            verbose: false,
        }
    }

    /// Planning horizon of 1-based iteration `it`.
    pub fn horizon_for(&self, it: usize) -> usize {
        match self.extended_horizon {
            Some(e) if it > e.after_iteration => e.horizon,
            _ => self.learning_horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("learning_horizon", self.learning_horizon),
            ("eval_horizon", self.eval_horizon),
            ("n_basis", self.n_basis),
            ("n_particles", self.n_particles),
            ("initial_samples", self.initial_samples),
            ("n_eval_starts", self.n_eval_starts),
            ("repeats", self.repeats),
            ("init_moment_samples", self.init_moment_samples),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if self.buffer_cap == Some(0) {
            return Err(Error::invalid("buffer_cap must be at least 1"));
        }
        if self.extended_horizon.is_some_and(|e| e.horizon == 0) {
            return Err(Error::invalid("extended horizon must be at least 1"));
        }
        if self.propagation == Propagation::Pf && self.n_particles < 2 {
            return Err(Error::invalid("particle propagation needs at least two particles"));
        }
        if self.env.task != self.task {
            return Err(Error::invalid(format!("env spec is for {}, config for {}", self.env.task, self.task)));
        }
        self.env.validate()?;
        self.policy_optim.validate()
    }

    /// Preset for the task named in `text` (TOML), overridden by every key
    /// present in the file. Nested tables merge key by key.
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let file: toml::Value = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        let file = serde_json::to_value(file)?;
        let task: Task = match file.get("task") {
            Some(t) => serde_json::from_value(t.clone())?,
            None => return Err(Error::Format("config: missing `task`".into())),
        };
        let mut merged = serde_json::to_value(ExperimentConfig::preset(task))?;
        merge(&mut merged, file);
        let cfg: ExperimentConfig = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Output file stem `{task}_{model}_{prop}`.
    pub fn stem(&self) -> String {
        format!("{}_{}_{}", self.task, self.model, self.propagation)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
