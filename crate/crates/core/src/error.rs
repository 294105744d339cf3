use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no convergence after {iterations} iterations in {routine}")]
    NoConvergence { routine: &'static str, iterations: usize },

    #[error("rank {rank} exceeds admissible maximum {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("rank {k} outside [{k_min}, {k_max}]")]
    RankOutOfRange { k: usize, k_min: usize, k_max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("profile error: {0}")]
    Profile(String),

    #[error("stale data: {0}")]
    Stale(String),

    #[error("no feasible entry: {0}")]
    Infeasible(String),

    #[error("underdetermined fit: {observations} observations for {unknowns} coefficients")]
    Underdetermined { observations: usize, unknowns: usize },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
