//! Crate-wide error type. Failures carry enough context to act on: shape
//! errors report both shapes, solver blowups report the time reached.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mesh violation: {0}")]
    MeshViolation(String),

    #[error("query point {0:?} lies outside the source mesh")]
    OutOfDomain(Vec<f64>),

    #[error("solver diverged at t = {t:.6}")]
    SolverDiverged { t: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn mesh(msg: impl Into<String>) -> Self {
        Error::MeshViolation(msg.into())
    }

    /// True for failures that should abort a run with the numeric exit code
    /// rather than the config one.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::SolverDiverged { .. } | Error::NonFinite(..)
        )
    }
}
