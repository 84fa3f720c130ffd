use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed y4m: {0}")]
    Y4m(String),
    #[error("image decode/encode failed for {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("no frames found in {0}")]
    NoFrames(PathBuf),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("window out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("encoder unavailable: {0}")]
    EncoderUnavailable(String),
    #[error("external command failed: {0}")]
    ExternalCommand(String),
    #[error("duplicate clip id `{0}`")]
    DuplicateClipId(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("insufficient candidates: {0}")]
    InsufficientCandidates(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("broken lineage: {0}")]
    Lineage(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
