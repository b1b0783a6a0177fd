use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CldError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CldError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("masked pooling over an all-false mask")]
    EmptyPool,

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value at iteration {iteration} of {stage}")]
    Numeric { stage: &'static str, iteration: usize },

    #[error("size guard: {0}")]
    Guard(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("unsupported model version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("certificate mismatch for {field}: stored {stored}, recomputed {recomputed}")]
    CertificateMismatch {
        field: &'static str,
        stored: f64,
        recomputed: f64,
    },

    #[error("model file error: {0}")]
    Model(String),

    #[error("synthetic generation error: {0}")]
    Generation(String),
}

impl CldError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CldError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CldError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
