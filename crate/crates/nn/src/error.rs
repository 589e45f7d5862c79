use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parameter blob: {0}")]
    Blob(String),
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: usize },
}

pub type Result<T> = std::result::Result<T, NnError>;
