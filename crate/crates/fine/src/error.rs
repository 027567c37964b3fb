use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("{op}: {details}")]
    InvalidInput { op: &'static str, details: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value produced by {op}: {details}")]
    NonFinite { op: &'static str, details: String },

    #[error("gradient check target is not deterministic: {0}")]
    NonDeterministic(String),

    #[error("estimator requires batch size >= 2, got {0}")]
    EstimatorBatch(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("corrupt dataset: {0}")]
    CorruptDataset(String),

    #[error("training step failed in {component}: {details}")]
    TrainingStep { component: String, details: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub fn input(op: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            details: details.into(),
        }
    }
}
