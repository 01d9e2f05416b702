//! Error type shared across the crate.
//!
//! The CLI maps variants onto process exit codes: configuration and usage
//! problems exit 2, numeric failures exit 3, I/O failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or range.
    #[error("config error: {0}")]
    Config(String),

    /// Caller misuse: empty batch, unknown class id, too few samples.
    #[error("usage error: {0}")]
    Usage(String),

    /// Shape or parameter-layout mismatch.
    #[error("structural error: {0}")]
    Structural(String),

    /// Non-finite value encountered; the message names where.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Degenerate input (zero mean gradient, zero Fisher norm, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Problem size exceeds a configured cap.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Iterative solver failed to converge.
    #[error("eigensolver did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config/usage, 3 numeric, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Structural(_) | Error::Capacity(_) => 2,
            Error::Numeric(_) | Error::Degenerate(_) | Error::NoConvergence { .. } => 3,
            Error::Io(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
