//! Error taxonomy shared by all solver and harness modules.

use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto exit codes:
/// config errors -> 2, numerical failures -> 3, precondition rejections -> 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed configuration, unknown variants, values out of range.
    #[error("config error: {0}")]
    Config(String),
    /// Evaluation outside the spatial domain or an unsupported lookup.
    #[error("domain error: {0}")]
    Domain(String),
    /// A moment/positivity precondition of the requested model failed.
    #[error("precondition rejected: {0}")]
    Precondition(String),
    /// CFL violations, NaN detection, quadrature non-convergence.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
