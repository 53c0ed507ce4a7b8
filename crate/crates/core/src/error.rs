use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown song `{0}`")]
    UnknownSong(String),

    #[error("feature `{feature}` missing from record `{song_key}`")]
    MissingFeature { song_key: String, feature: String },

    #[error("similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("events for user `{user}` are not sorted by timestamp")]
    Unsorted { user: String },

    #[error("forward trace is stale: recorded for parameter generation {trace}, current is {current}")]
    StaleTrace { trace: u64, current: u64 },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Pipeline(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration rather than by data
    /// or the environment.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
