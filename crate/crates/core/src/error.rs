use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid grid: {0}")]
    Grid(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(
        "coupling map is not a diffeomorphism at this point (Jacobian determinant sign {sign}); \
         consider enabling the trust region"
    )]
    Diffeomorphism { sign: f64 },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{failed} of {total} optimization solves failed to converge")]
    TooManyFailures { failed: usize, total: usize },

    #[error("sampler aborted at step {step} ({state}): {reason}")]
    Aborted {
        step: usize,
        state: String,
        reason: String,
    },

    #[error("chain has zero variance")]
    ZeroVariance,

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
