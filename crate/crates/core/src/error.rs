use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration or numeric parameter is out of range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Every particle has zero likelihood; the ensemble cannot be reweighted.
    #[error("degenerate ensemble: {0}")]
    Degenerate(String),

    /// A time step exceeded the configured CFL bound and the run was asked to abort.
    #[error("CFL violation: courant number {courant:.3} exceeds {limit:.3}")]
    Cfl { courant: f64, limit: f64 },

    /// A file did not match the expected binary or text layout.
    #[error("malformed file {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}

pub(crate) fn parameter<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Parameter(msg.into()))
}
