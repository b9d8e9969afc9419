use serde::{Deserialize, Serialize};

use super::{check_queries, DynamicsModel, Linearization, PredictiveGaussian};
use crate::exec::Execution;
use crate::numerics::Matrix;
use crate::{Error, Result};

/// `Δ ~ N(A·x + c, diag(variance))`, independent of the input.
///
/// Useful as an exactly solvable model for checking propagation schemes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianModel {
    pub a: Matrix,
    pub offset: Vec<f64>,
    pub variance: Vec<f64>,
}

impl LinearGaussianModel {
    pub fn new(a: Matrix, offset: Vec<f64>, variance: Vec<f64>) -> Result<LinearGaussianModel> {
        if offset.len() != a.rows() || variance.len() != a.rows() {
            return Err(Error::invalid("offset and variance must have one entry per output"));
        }
        if variance.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("variances must be nonnegative"));
        }
        Ok(LinearGaussianModel { a, offset, variance })
    }
}

impl DynamicsModel for LinearGaussianModel {
    fn input_dim(&self) -> usize {
        self.a.cols()
    }

    fn output_dim(&self) -> usize {
        self.a.rows()
    }

    fn predict(&self, x: &Matrix) -> Result<Vec<PredictiveGaussian>> {
        check_queries(x, self.input_dim())?;
        Ok((0..x.rows())
            .map(|r| PredictiveGaussian {
                mean: self.a.matvec(x.row(r)).iter().zip(&self.offset).map(|(m, c)| m + c).collect(),
                variance: self.variance.clone(),
            })
            .collect())
    }

    fn linearize(&self, x: &Matrix, _exec: Execution) -> Result<Vec<Linearization>> {
        Ok(self
            .predict(x)?
            .into_iter()
            .map(|prediction| Linearization {
                prediction,
                mean_jacobian: self.a.clone(),
                variance_jacobian: Matrix::zeros(self.a.rows(), self.a.cols()),
            })
            .collect())
    }
}
