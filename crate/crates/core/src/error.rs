//! Error taxonomy shared across the crate.
//!
//! The CLI maps these variants onto process exit codes, so the distinction
//! between a validation error (bad input), a capability error (valid input
//! that no implemented path can handle) and a cost refusal matters.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input: broken invariants, out-of-domain parameters,
    /// contract violations.
    #[error("validation error: {0}")]
    Validation(String),

    /// Valid input for which no implemented computational path exists
    /// (e.g. dense rectangle quadrature above the dimension cap).
    #[error("capability error: {0}")]
    Capability(String),

    /// The projected floating-point work exceeds the configured budget.
    #[error("cost refusal: {0}")]
    CostRefusal(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn capability(msg: impl Into<String>) -> Self {
        Error::Capability(msg.into())
    }

    /// Exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => 2,
            Error::Capability(_) => 3,
            Error::CostRefusal(_) => 4,
            Error::Io { .. } => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
