use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("user {user}: only {available} candidate items for {requested} negatives")]
    UniverseTooSmall {
        user: usize,
        requested: usize,
        available: usize,
    },
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        term: &'static str,
        value: f64,
    },
    #[error("frozen transfer network used before it was captured")]
    SnapshotMissing,
    #[error(transparent)]
    Tensor(#[from] ufrec_tensor::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
