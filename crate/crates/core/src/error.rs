use std::path::PathBuf;

use reskan_tensor::TensorError;
use thiserror::Error;

/// Every failure the library reports. Variants map onto the CLI's
/// one-line diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
pub(crate) use {config_err, data_err};
