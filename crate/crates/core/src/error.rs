use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates a documented precondition.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API was called in a state or with arguments it does not accept.
    #[error("usage error: {0}")]
    Usage(String),
    /// Training produced a non-finite loss or gradient.
    #[error("divergence in {context}: {detail}")]
    Divergence { context: String, detail: String },
    /// A persisted artifact could not be read back.
    #[error("load error in {path}: {detail}")]
    Load { path: PathBuf, detail: String },
    /// A pipeline stage failed; partial artifacts stay on disk.
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] redaug_nn::NnError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn divergence(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Divergence { context: context.into(), detail: detail.into() }
    }

    pub fn load(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Load { path: path.into(), detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
