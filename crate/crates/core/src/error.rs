use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("resampling error: {0}")]
    Resample(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("stats error: {0}")]
    Stats(String),
    #[error("fold error: {0}")]
    Fold(String),
    #[error("training diverged in {stage}: {detail}")]
    NonFinite { stage: String, detail: String },
    #[error("training error: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing or stale upstream artifact: rerun `{stage}` ({detail})")]
    Dependency { stage: String, detail: String },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
