use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with inputs that violate its contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate fusion: all fused weights vanished (vocabulary size {vocab_size}, min prior mass {min_prior_mass:e})")]
    DegenerateFusion { vocab_size: usize, min_prior_mass: f64 },

    #[error("ill-posed problem: {0}")]
    IllPosed(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag, used in structured stderr lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Validation(_) => "validation",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateFusion { .. } => "degenerate_fusion",
            Error::IllPosed(_) => "ill_posed",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Backend(_) => "backend",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
