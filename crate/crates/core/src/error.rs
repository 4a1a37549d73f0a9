use std::path::PathBuf;

/// Errors surfaced by the retrieval pipeline.
#[derive(Debug, thiserror::Error)]
pub enum DuetError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("manifest validation failed: {0}")]
    Validation(String),

    #[error("protocol {protocol} is missing required metadata: {missing:?}")]
    Protocol {
        protocol: String,
        missing: Vec<String>,
    },

    #[error("backbone fingerprint mismatch: index built with {index}, checkpoint is {checkpoint}")]
    Fingerprint { index: String, checkpoint: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = DuetError> = std::result::Result<T, E>;

impl DuetError {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        DuetError::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        DuetError::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
