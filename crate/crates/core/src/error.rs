use thiserror::Error;

/// Errors surfaced by the few-shot engine.
#[derive(Debug, Error)]
pub enum ArlError {
    /// Tensor shapes or axes do not line up for an operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// Not enough classes or instances to satisfy a request.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Batch-norm evaluation requested before running statistics exist.
    #[error("stats-uninitialized: batch-norm running statistics for `{0}` were never set")]
    StatsUninitialized(String),

    #[error("attribute-missing({0})")]
    AttributeMissing(i64),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite-loss({iteration})")]
    NonFiniteLoss { iteration: usize },

    #[error("descriptor mismatch:\n  checkpoint: {checkpoint}\n  dataset:    {dataset}")]
    DescriptorMismatch { checkpoint: String, dataset: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = ArlError> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> ArlError {
    ArlError::Dimension {
        op,
        detail: detail.into(),
    }
}
