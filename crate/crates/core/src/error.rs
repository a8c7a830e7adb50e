use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps each variant onto a process
/// exit code (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("i/o error at {path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("numerical abort at iteration {iteration}: {message}")]
    Numerical {
        iteration: usize,
        message: String,
        /// Loss rows recorded before the abort, as `(total, reconst, excl, reg)`.
        history: Vec<[f64; 4]>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// 2 for configuration problems (shape and domain errors are bad inputs
    /// too), 3 for I/O, 4 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Domain(_) => 2,
            Error::Io { .. } => 3,
            Error::Numerical { .. } => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Non-fatal conditions reported alongside a result.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub enum Warning {
    /// Two mixtures share the same coefficient, so the layers cannot be
    /// recovered from them.
    NonIdentifiableMixtures,
    /// Single-image transparency without any hint; the split is ambiguous.
    AmbiguousSingleMixture,
    /// Correlation requested against a constant image.
    ZeroVariance,
}
