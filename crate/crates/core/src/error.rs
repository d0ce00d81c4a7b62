use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("invalid module id: {0}")]
    Id(String),

    #[error("refused: {0}")]
    Refusal(String),

    #[error("planning error: {0}")]
    Planning(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Loss went non-finite. `last_good` is the student state before the
    /// failing update.
    #[error("training diverged at step {step}: {reason}")]
    Training {
        step: usize,
        reason: String,
        last_good: Box<crate::model::DualEncoder<f64>>,
    },

    #[error("format error in tensor `{tensor}`: {reason}")]
    Format { tensor: String, reason: String },

    #[error("dataset spec error: {0}")]
    Spec(String),

    #[error("hash mismatch for {what}: declared {declared}, found {found}")]
    HashMismatch {
        what: String,
        declared: String,
        found: String,
    },

    #[error("report error: missing {0:?}")]
    Report(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Range(_) => "range",
            Error::Id(_) => "id",
            Error::Refusal(_) => "refusal",
            Error::Planning(_) => "planning",
            Error::Usage(_) => "usage",
            Error::Training { .. } => "training",
            Error::Format { .. } => "format",
            Error::Spec(_) => "spec",
            Error::HashMismatch { .. } => "hash-mismatch",
            Error::Report(_) => "report",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
