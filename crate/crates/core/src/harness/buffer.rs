use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::envs::{env_reset, env_step, EnvSpec};
use crate::numerics::{Matrix, RngStream};
use crate::{Error, Result};

/// One observed transition: model input `s ‖ a` and target `s' − s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl Transition {
    pub fn new(obs: &[f64], action: f64, next_obs: &[f64]) -> Transition {
        let mut input = obs.to_vec();
        input.push(action);
        let target = next_obs.iter().zip(obs).map(|(b, a)| b - a).collect();
        Transition { input, target }
    }
}

/// Transitions in arrival order; the oldest are evicted beyond `cap`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataBuffer {
    transitions: VecDeque<Transition>,
    cap: Option<usize>,
    /// Transitions ever appended, including evicted ones.
    total: usize,
}

impl DataBuffer {
    pub fn new(cap: Option<usize>) -> DataBuffer {
        DataBuffer { transitions: VecDeque::new(), cap, total: 0 }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn cap(&self) -> Option<usize> {
        self.cap
    }

    pub fn total_appended(&self) -> usize {
        self.total
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push_back(t);
        self.total += 1;
        if let Some(cap) = self.cap {
            while self.transitions.len() > cap {
                self.transitions.pop_front();
            }
        }
    }

    /// Model inputs and targets as matrices.
    pub fn to_matrices(&self) -> Result<(Matrix, Matrix)> {
        if self.is_empty() {
            return Err(Error::invalid("empty data buffer"));
        }
        let inputs: Vec<&[f64]> = self.iter().map(|t| t.input.as_slice()).collect();
        let targets: Vec<&[f64]> = self.iter().map(|t| t.target.as_slice()).collect();
        Ok((Matrix::from_rows(&inputs)?, Matrix::from_rows(&targets)?))
    }
}

pub fn buffer_append(mut buf: DataBuffer, transitions: impl IntoIterator<Item = Transition>) -> DataBuffer {
    for t in transitions {
        buf.push(t);
    }
    buf
}

/// `n` transitions under uniformly random actions, resetting after termination.
pub fn collect_random(spec: &EnvSpec, n: usize, cap: Option<usize>, rng: &mut RngStream) -> Result<DataBuffer> {
    if n == 0 {
        return Err(Error::invalid("at least one random transition is required"));
    }
    let mut buf = DataBuffer::new(cap);
    let mut state = env_reset(spec, rng);
    while buf.total_appended() < n {
        let a = rng.uniform(-spec.u_max, spec.u_max);
        let (next, done, _) = env_step(spec, &state, a)?;
        buf.push(Transition::new(&state.observation, a, &next.observation));
        state = if done { env_reset(spec, rng) } else { next };
    }
    Ok(buf)
}
