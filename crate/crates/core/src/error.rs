//! Error type shared by all core modules.

/// Errors raised by tensor operations, parameter management and the networks.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Dimension mismatch between operands.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid argument value (empty list, out-of-range label, ...).
    #[error("argument error: {0}")]
    Argument(String),
    /// Inconsistent architecture configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Tape misuse: double backward, non-scalar loss, detached tensor.
    #[error("tape error: {0}")]
    Tape(String),
    /// Parameter store inconsistency (unknown name, duplicate, missing gradient).
    #[error("parameter error: {0}")]
    Param(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
