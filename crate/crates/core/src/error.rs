use std::io;

use thiserror::Error;

/// Errors raised anywhere in the surrogate workflow.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("generator capacity exceeded: {0}")]
    Capacity(String),

    #[error("covariance matrix is not positive definite (most negative eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("non-finite log marginal likelihood: {0}")]
    NonFiniteLikelihood(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("level {level} ({family}) failed: {message}")]
    Level {
        level: usize,
        family: &'static str,
        message: String,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
