use thiserror::Error;

/// Errors raised by the estimation and projection routines.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: bad probability tables, mismatched dimensions, empty data.
    #[error("validation error: {0}")]
    Validation(String),

    /// A policy places mass where the natural instrument density is zero.
    #[error("positivity violation: {0}")]
    Positivity(String),

    /// An iterative solver failed to reach its tolerance.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// The requested computation is not defined for this input class.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A linear system had no unique solution.
    #[error("singular system: {0}")]
    Singular(String),

    /// An internal invariant was breached (e.g. EM lost the ascent property).
    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
