use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{count} configuration error(s): {}", .errors.join("; "))]
    ConfigList { count: usize, errors: Vec<String> },

    #[error("ingestion failed for {}: {reason}", .path.display())]
    Ingest { path: PathBuf, reason: String },

    #[error("timeline misalignment: {0}")]
    Misaligned(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("spatial relation matrix row {row} sums to {sum} (expected 1)")]
    NotRowStochastic { row: usize, sum: f64 },

    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { context, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True when the error stems from bad numbers rather than bad inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => true,
            Error::Sample { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Csv(e) => e.is_io_error(),
            Error::Sample { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
