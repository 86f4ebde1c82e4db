use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input shape error: {0}")]
    Shape(String),
    #[error("numeric input error: {0}")]
    Numeric(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("ingestion error ({}): {message}", path.display())]
    Ingestion { path: PathBuf, message: String },
    #[error("training diverged at epoch {epoch}, step {step}: total loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn ingestion(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
