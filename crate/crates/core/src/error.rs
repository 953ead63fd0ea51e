use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which covariance failed validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceRole {
    Process,
    Measurement,
}

impl std::fmt::Display for CovarianceRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CovarianceRole::Process => write!(f, "process covariance Q"),
            CovarianceRole::Measurement => write!(f, "measurement covariance R"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0} is not symmetric positive definite")]
    NonPositiveDefinite(CovarianceRole),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("bad hyperparameter: {0}")]
    BadHyperparameter(String),

    #[error("model produced a non-finite value ({0})")]
    NonFiniteModelOutput(String),

    #[error("mode weights at t = {t} are outside the simplex")]
    InfeasibleW { t: usize },

    #[error("non-finite state during simulation at sample {0}")]
    NonFiniteState(usize),

    #[error("invalid initial state: {0}")]
    InitialStateOutsideDomain(String),

    #[error("state at sample {0} lies in no mode domain")]
    NoValidMode(usize),

    #[error("block Cholesky failed at block {block}: curvature lost positive definiteness")]
    FactorizationFailure { block: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
