use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The objective (or its gradient) was not finite; `segment` names the
    /// parameter block that was implicated.
    #[error("evaluation failure in segment `{segment}`: {reason}")]
    EvaluationFailure { segment: String, reason: String },

    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    #[error("environment failure: {0}")]
    EnvironmentFailure(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure(msg.into())
    }
}
