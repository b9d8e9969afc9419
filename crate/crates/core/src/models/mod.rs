//! Probabilistic dynamics models over `(state ‖ action) → Δstate`.
//!
//! Every model treats output dimensions independently and returns a diagonal
//! Gaussian per query. Inputs and targets are standardized per dimension
//! before fitting and predictions are mapped back to data units.

mod checkpoint;
mod dgcn;
mod gp;
mod linear;
mod mlp;
mod pnn;
mod standardize;

pub use checkpoint::{load_model, read_checkpoint, save_model, write_checkpoint, AnyModel, CHECKPOINT_VERSION};
pub use dgcn::{dgcn_fit, dgcn_network, DgcnFitConfig, DgcnModel, DgcnOutput, DGCN_LENGTHSCALE_FLOOR, DGCN_NOISE_FLOOR};
pub use gp::{gp_fit, gp_log_marginal_likelihood, GpFitConfig, GpModel};
pub use linear::LinearGaussianModel;
pub use mlp::{Activation, Mlp};
pub use pnn::{epnn_fit, pnn_fit, EpnnModel, PnnFitConfig, PnnModel, PNN_VARIANCE_FLOOR};
pub use standardize::Standardizer;

use serde::{Deserialize, Serialize};

use crate::exec::Execution;
use crate::numerics::Matrix;
use crate::{Error, Result};

/// Per-output mean and variance at one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// A prediction together with its input Jacobians (`outputs × inputs`).
#[derive(Debug, Clone)]
pub struct Linearization {
    pub prediction: PredictiveGaussian,
    pub mean_jacobian: Matrix,
    pub variance_jacobian: Matrix,
}

pub trait DynamicsModel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// One prediction per row of `x`.
    fn predict(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>>;

    /// Predictions with derivatives with respect to the query inputs.
    fn linearize(&self, x: &Matrix, exec: Execution) -> Result<Vec<Linearization>>;
}

pub(crate) fn check_training_data(inputs: &Matrix, targets: &Matrix) -> Result<()> {
    if inputs.rows() != targets.rows() {
        return Err(Error::invalid(format!(
            "{} inputs but {} targets",
            inputs.rows(),
            targets.rows()
        )));
    }
    if inputs.rows() < 2 {
        return Err(Error::invalid("at least two training samples are required"));
    }
    if inputs.cols() == 0 || targets.cols() == 0 {
        return Err(Error::invalid("empty input or target dimension"));
    }
    if inputs.as_slice().iter().chain(targets.as_slice()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("training data must be finite"));
    }
    Ok(())
}

pub(crate) fn check_queries(x: &Matrix, dim: usize) -> Result<()> {
    if x.cols() != dim {
        return Err(Error::invalid(format!("query has {} columns, model expects {dim}", x.cols())));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("query points must be finite"));
    }
    Ok(())
}

/// Split `0..n` into at most `parts` contiguous ranges.
pub(crate) fn chunk_ranges(n: usize, parts: usize) -> Vec<std::ops::Range<usize>> {
    let parts = parts.clamp(1, n.max(1));
    let size = n.div_ceil(parts);
    (0..n).step_by(size.max(1)).map(|s| s..(s + size).min(n)).collect()
}

pub(crate) fn worker_chunks(exec: Execution, n: usize) -> Vec<std::ops::Range<usize>> {
    let parts = if exec.is_parallel() { crate::exec::threads() * 2 } else { 1 };
    chunk_ranges(n, parts)
}
