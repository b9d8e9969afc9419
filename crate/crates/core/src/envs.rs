//! Analytic benchmark tasks: pendulum swing-up (P), continuous mountain car
//! (CMC), cart-pole swing-up (IPSU) and cart double pole balancing (IDP).
//!
//! Angles are measured from upright. Policies and models see observations,
//! which encode single pole angles as `(cos θ, sin θ)`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::{Gaussian, RngStream};
use crate::rollout::{exponential_reward, RewardSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    P,
    Cmc,
    Ipsu,
    Idp,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::P, Task::Cmc, Task::Ipsu, Task::Idp];

    pub fn name(self) -> &'static str {
        match self {
            Task::P => "p",
            Task::Cmc => "cmc",
            Task::Ipsu => "ipsu",
            Task::Idp => "idp",
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            Task::P => 3,
            Task::Cmc => 2,
            Task::Ipsu => 5,
            Task::Idp => 6,
        }
    }

    pub fn internal_dim(self) -> usize {
        match self {
            Task::P | Task::Cmc => 2,
            Task::Ipsu => 4,
            Task::Idp => 6,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Task> {
        match s.to_ascii_lowercase().as_str() {
            "p" => Ok(Task::P),
            "cmc" => Ok(Task::Cmc),
            "ipsu" => Ok(Task::Ipsu),
            "idp" => Ok(Task::Idp),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Physics {
    /// `θ̈ = 3g/(2l) sin θ + 3u/(m l²)`, semi-implicit Euler, speed clipped.
    Pendulum { gravity: f64, mass: f64, length: f64, max_speed: f64 },
    /// Discrete-time mountain car map.
    MountainCar { power: f64, hill: f64, min_position: f64, max_position: f64, max_speed: f64 },
    /// Cart with a uniform rod hinged at one end.
    CartPole { cart_mass: f64, pole_mass: f64, pole_length: f64, friction: f64, gravity: f64 },
    /// Cart with two chained uniform rods.
    CartDoublePole {
        cart_mass: f64,
        pole_masses: [f64; 2],
        pole_lengths: [f64; 2],
        friction: f64,
        gravity: f64,
        /// Terminate once the upper tip is below this fraction of full height.
        tip_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub task: Task,
    pub dt: f64,
    pub u_max: f64,
    pub physics: Physics,
    /// Mean and per-dimension std of the internal initial state.
    pub init_mean: Vec<f64>,
    pub init_std: Vec<f64>,
    pub reward: RewardSpec,
    /// Typical observation magnitude, used to initialize policies.
    pub obs_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub internal: Vec<f64>,
    pub observation: Vec<f64>,
}

impl EnvSpec {
    pub fn new(task: Task) -> EnvSpec {
        let reward = |target: Vec<f64>, weights: Vec<f64>| RewardSpec::new(target, weights);
        match task {
            Task::P => EnvSpec {
                task,
                dt: 0.05,
                u_max: 2.0,
                physics: Physics::Pendulum { gravity: 10.0, mass: 1.0, length: 1.0, max_speed: 8.0 },
                init_mean: vec![PI, 0.0],
                init_std: vec![0.1, 0.1],
                reward: reward(vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.1]),
                obs_scale: vec![1.0, 1.0, 3.0],
            },
            Task::Cmc => EnvSpec {
                task,
                dt: 1.0,
                u_max: 1.0,
                physics: Physics::MountainCar {
                    power: 0.0015,
                    hill: 0.0025,
                    min_position: -1.2,
                    max_position: 0.6,
                    max_speed: 0.07,
                },
                init_mean: vec![-0.5, 0.0],
                init_std: vec![0.05, 0.005],
                reward: reward(vec![0.45, 0.0], vec![1.0, 0.1]),
                obs_scale: vec![0.5, 0.05],
            },
            Task::Ipsu => EnvSpec {
                task,
                dt: 0.1,
                u_max: 10.0,
                physics: Physics::CartPole {
                    cart_mass: 0.5,
                    pole_mass: 0.5,
                    pole_length: 0.6,
                    friction: 0.1,
                    gravity: 9.82,
                },
                init_mean: vec![0.0, 0.0, PI, 0.0],
                init_std: vec![0.05, 0.05, 0.05, 0.05],
                reward: reward(vec![0.0, 0.0, 1.0, 0.0, 0.0], vec![1.0, 0.1, 1.0, 1.0, 0.1]),
                obs_scale: vec![1.0, 2.0, 1.0, 1.0, 5.0],
            },
            Task::Idp => EnvSpec {
                task,
                dt: 0.05,
                u_max: 20.0,
                physics: Physics::CartDoublePole {
                    cart_mass: 1.0,
                    pole_masses: [0.1, 0.1],
                    pole_lengths: [0.5, 0.5],
                    friction: 0.1,
                    gravity: 9.82,
                    tip_fraction: 0.8,
                },
                init_mean: vec![0.0; 6],
                init_std: vec![0.05, 0.05, 0.05, 0.05, 0.05, 0.05],
                reward: reward(vec![0.0; 6], vec![1.0, 1.0, 1.0, 0.1, 0.1, 0.1]),
                obs_scale: vec![1.0, 0.3, 0.3, 1.0, 2.0, 2.0],
            },
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.task.obs_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.task.internal_dim();
        if self.init_mean.len() != n || self.init_std.len() != n {
            return Err(Error::invalid(format!("{} init needs {n} entries", self.task)));
        }
        if self.init_std.iter().any(|s| !(*s >= 0.0)) || !(self.dt > 0.0) || !(self.u_max > 0.0) {
            return Err(Error::invalid("init std must be nonnegative, dt and u_max positive"));
        }
        if self.obs_scale.len() != self.obs_dim() || self.obs_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("obs_scale must be positive with one entry per observation"));
        }
        self.reward.validate(self.obs_dim())?;
        let matches = matches!(
            (self.task, &self.physics),
            (Task::P, Physics::Pendulum { .. })
                | (Task::Cmc, Physics::MountainCar { .. })
                | (Task::Ipsu, Physics::CartPole { .. })
                | (Task::Idp, Physics::CartDoublePole { .. })
        );
        if !matches {
            return Err(Error::invalid(format!("physics does not match task {}", self.task)));
        }
        Ok(())
    }

    /// Gaussian over the internal initial state.
    pub fn init_distribution(&self) -> Result<Gaussian> {
        let var: Vec<f64> = self.init_std.iter().map(|s| s * s).collect();
        Gaussian::diagonal(self.init_mean.clone(), &var)
    }

    pub fn observe(&self, internal: &[f64]) -> Vec<f64> {
        observe(self.task, internal)
    }

    /// Termination predicate on the internal state (IDP only).
    pub fn terminated(&self, internal: &[f64]) -> bool {
        match &self.physics {
            Physics::CartDoublePole { pole_lengths: [l1, l2], tip_fraction, .. } => {
                l1 * internal[1].cos() + l2 * internal[2].cos() < tip_fraction * (l1 + l2)
            }
            _ => false,
        }
    }

    /// Termination predicate on observations, for model rollouts.
    pub fn terminated_obs(&self, obs: &[f64]) -> bool {
        match self.task {
            // IDP observations contain the raw angles.
            Task::Idp => self.terminated(obs),
            _ => false,
        }
    }

    pub fn has_termination(&self) -> bool {
        matches!(self.physics, Physics::CartDoublePole { .. })
    }

    /// Continuous-time derivative of the internal state (IPSU, IDP).
    fn derivative(&self, s: &[f64], u: f64) -> Vec<f64> {
        match &self.physics {
            Physics::CartPole { cart_mass, pole_mass, pole_length, friction, gravity } => {
                let (m0, m, l, b, g) = (*cart_mass, *pole_mass, *pole_length, *friction, *gravity);
                let (xd, th, thd) = (s[1], s[2], s[3]);
                let (sn, cs) = th.sin_cos();
                let xdd = (4.0 * u - 4.0 * b * xd + 2.0 * m * l * thd * thd * sn - 3.0 * m * g * sn * cs)
                    / (4.0 * (m0 + m) - 3.0 * m * cs * cs);
                let thdd = 3.0 * (g * sn - cs * xdd) / (2.0 * l);
                vec![xd, xdd, thd, thdd]
            }
            Physics::CartDoublePole { cart_mass, pole_masses: [m1, m2], pole_lengths: [l1, l2], friction, gravity, .. } => {
                let (t1, t2, xd, w1, w2) = (s[1], s[2], s[3], s[4], s[5]);
                let (s1, c1) = t1.sin_cos();
                let (s2, c2) = t2.sin_cos();
                let (s12, c12) = (t1 - t2).sin_cos();
                let a = m1 * l1 / 2.0 + m2 * l1;
                let c = m2 * l1 * l2 / 2.0;
                let e = m2 * l2 / 2.0;
                let m = [
                    [cart_mass + m1 + m2, a * c1, e * c2],
                    [a * c1, m1 * l1 * l1 / 3.0 + m2 * l1 * l1, c * c12],
                    [e * c2, c * c12, m2 * l2 * l2 / 3.0],
                ];
                let rhs = [
                    u - friction * xd + a * s1 * w1 * w1 + e * s2 * w2 * w2,
                    -c * s12 * w2 * w2 + gravity * a * s1,
                    c * s12 * w1 * w1 + gravity * e * s2,
                ];
                let acc = solve3(m, rhs);
                vec![xd, w1, w2, acc[0], acc[1], acc[2]]
            }
            _ => unreachable!("derivative is only used by the RK4 tasks"),
        }
    }

    /// Advance the internal state by one `dt` under action `u` (clipped).
    pub fn integrate(&self, s: &[f64], u: f64) -> Vec<f64> {
        let u = u.clamp(-self.u_max, self.u_max);
        match &self.physics {
            Physics::Pendulum { gravity, mass, length, max_speed } => {
                let acc = 3.0 * gravity / (2.0 * length) * s[0].sin() + 3.0 * u / (mass * length * length);
                let w = (s[1] + acc * self.dt).clamp(-max_speed, *max_speed);
                vec![s[0] + w * self.dt, w]
            }
            Physics::MountainCar { power, hill, min_position, max_position, max_speed } => {
                let mut v = (s[1] + u * power - hill * (3.0 * s[0]).cos()).clamp(-max_speed, *max_speed);
                let p = (s[0] + v).clamp(*min_position, *max_position);
                if p <= *min_position && v < 0.0 {
                    v = 0.0;
                }
                vec![p, v]
            }
            _ => rk4(s, self.dt, |y| self.derivative(y, u)),
        }
    }
}

fn rk4(s: &[f64], dt: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let add = |a: &[f64], b: &[f64], h: f64| a.iter().zip(b).map(|(x, y)| x + h * y).collect::<Vec<_>>();
    let k1 = f(s);
    let k2 = f(&add(s, &k1, dt / 2.0));
    let k3 = f(&add(s, &k2, dt / 2.0));
    let k4 = f(&add(s, &k3, dt));
    (0..s.len()).map(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// Cramer's rule for the (well-conditioned, positive-definite) 3×3 mass matrix.
fn solve3(m: [[f64; 3]; 3], b: [f64; 3]) -> [f64; 3] {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(m);
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = b[r];
        }
        *o = det(mk) / d;
    }
    out
}

pub fn observe(task: Task, internal: &[f64]) -> Vec<f64> {
    match task {
        Task::P => vec![internal[0].cos(), internal[0].sin(), internal[1]],
        Task::Cmc => internal.to_vec(),
        Task::Ipsu => vec![internal[0], internal[1], internal[2].cos(), internal[2].sin(), internal[3]],
        Task::Idp => internal.to_vec(),
    }
}

/// Inverse of [`observe`]; angle encodings need not lie on the unit circle.
pub fn internal_from_observation(task: Task, obs: &[f64]) -> Vec<f64> {
    match task {
        Task::P => vec![obs[1].atan2(obs[0]), obs[2]],
        Task::Ipsu => vec![obs[0], obs[1], obs[3].atan2(obs[2]), obs[4]],
        Task::Cmc | Task::Idp => obs.to_vec(),
    }
}

pub fn env_reset(spec: &EnvSpec, rng: &mut RngStream) -> EnvState {
    let internal: Vec<f64> = spec.init_mean.iter().zip(&spec.init_std).map(|(m, s)| m + s * rng.normal()).collect();
    let observation = spec.observe(&internal);
    EnvState { internal, observation }
}

/// One step; the reward is computed on the next observation, or is the
/// termination penalty when the step terminates the episode.
pub fn env_step(spec: &EnvSpec, state: &EnvState, action: f64) -> Result<(EnvState, bool, f64)> {
    if !action.is_finite() {
        return Err(Error::EnvironmentFailure(format!("non-finite action {action}")));
    }
    let internal = spec.integrate(&state.internal, action);
    if internal.iter().any(|v| !v.is_finite()) {
        return Err(Error::EnvironmentFailure(format!("{} state diverged: {internal:?}", spec.task)));
    }
    let observation = spec.observe(&internal);
    let terminated = spec.terminated(&internal);
    let reward = if terminated { spec.reward.termination_penalty } else { exponential_reward(&observation, &spec.reward) };
    Ok((EnvState { internal, observation }, terminated, reward))
}
