use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("mask ingestion failed for {file}: {reason}")]
    MaskIngestion { file: String, reason: String },

    #[error("non-finite loss at step {step}: itc={itc} itm={itm} itg={itg}")]
    NonFiniteLoss {
        step: usize,
        itc: f64,
        itm: f64,
        itg: f64,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
