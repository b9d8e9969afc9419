//! Model-based policy search with probabilistic dynamics models.
//!
//! The crate learns state-transition models (exact GP, a nonstationary GP whose
//! kernel parameters come from a neural network, and an ensemble of
//! probabilistic neural networks), propagates state uncertainty through them
//! either by Gaussian particle approximation or by trajectory sampling, and
//! optimizes a radial-basis-function controller by gradient descent on the
//! expected cumulative cost.
//!
//! Module map:
//!
//! * [`numerics`]: dense matrices, jittered Cholesky solves, Gaussians, seeded RNG streams.
//! * [`diffopt`]: reverse-mode tape, flat parameter vectors, Adam with restarts.
//! * [`kernels`]: stationary and input-dependent covariance functions.
//! * [`models`]: GP, DGCN and (E-)PNN dynamics models.
//! * [`policy`]: RBF controller with a bounded sine squash.
//! * [`rollout`]: particle (moment) and trajectory-sampling propagation.
//! * [`envs`]: pendulum, mountain car, cart-pole swing-up, cart double pole.
//! * [`harness`]: the outer learning loop, evaluation protocol and reporting.

pub mod diffopt;
pub mod envs;
mod error;
pub mod exec;
pub mod harness;
pub mod kernels;
pub mod models;
pub mod numerics;
pub mod policy;
pub mod rollout;

pub use error::{Error, Result};
