use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the feature, model, loss and pipeline layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data error: {0}")]
    Data(String),

    #[error("data error in {}: {msg}", path.display())]
    DataFile { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn data_file(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::DataFile {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }

    pub(crate) fn loss(msg: impl Into<String>) -> Self {
        Error::Loss(msg.into())
    }

    pub(crate) fn pipeline(msg: impl Into<String>) -> Self {
        Error::Pipeline(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
