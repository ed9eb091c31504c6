use thiserror::Error;

/// Errors raised by tensor construction, graph recording and backward.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Shapes, extents or hyperparameters that cannot produce a valid result.
    #[error("configuration error: {0}")]
    Config(String),
    /// Failures that depend on runtime values (degenerate statistics, NaN).
    #[error("runtime error: {0}")]
    Runtime(String),
    /// Misuse of the API, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),
    /// Bad input data such as out-of-range labels.
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::TensorError::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
