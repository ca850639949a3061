//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter or argument is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// An operation produced NaN or Inf while finite checks were enabled.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// Misuse of the differentiation tape (non-scalar loss, double backward, ...).
    #[error("autograd: {0}")]
    Autograd(String),

    /// Malformed tensor blob, checkpoint, or config text.
    #[error("format error: {0}")]
    Format(String),

    /// Training aborted (non-finite loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
