use thiserror::Error;

use crate::theory::RejectedInstance;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// `backward` was asked to differentiate a value with no trainable ancestors.
    #[error("empty tape: {0}")]
    EmptyTape(String),

    /// Malformed file contents (bad magic, unknown version, bad field).
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must agree do not (e.g. image/label counts).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// NaN or infinity encountered during optimization.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A theory instance fell outside the admissible parameter set.
    #[error("instance rejected: {0}")]
    InstanceRejected(Box<RejectedInstance>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
