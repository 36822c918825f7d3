use std::path::PathBuf;

use bapgan_autograd::ShapeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("ingestion error at {}{}: {message}", path.display(), line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Ingestion {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {components}")]
    NonFinite { step: u64, components: String },
    #[error("missing pretrained weights: {0}")]
    MissingWeights(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<ShapeError> for Error {
    fn from(e: ShapeError) -> Self {
        Error::Dimension(e.to_string())
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingest(path: impl Into<PathBuf>, line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
