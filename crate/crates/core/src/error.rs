use std::path::PathBuf;

use gpp_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid argument: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: format error: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("provider {provider} failed after {retries} retries: {detail}")]
    Provider {
        provider: String,
        retries: u32,
        detail: String,
    },

    #[error("assessing {attribute} ({scope}): {source}")]
    Assessment {
        attribute: &'static str,
        scope: String,
        #[source]
        source: Box<CoreError>,
    },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Validation(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}
