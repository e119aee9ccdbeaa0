//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// A primitive was applied to tensors with incompatible shapes.
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An operation contract was violated (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A point-cloud or checkpoint file is malformed.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Sequence exceeds the model's maximum length.
    #[error("sequence error: length {len} exceeds max_seq {max}")]
    Sequence { len: usize, max: usize },

    /// The training loss left the finite range.
    #[error("non-finite loss at step {step} (batch {batch}): loss={loss}, max_logit={max_logit}")]
    NonFiniteLoss {
        step: usize,
        batch: usize,
        loss: f64,
        max_logit: f64,
    },

    /// Snapshot comparison failed structurally (not a freeze violation).
    #[error("audit error: {0}")]
    Audit(String),

    /// Checkpoint load failure naming the offending tensor.
    #[error("checkpoint load error for `{path}`: {detail}")]
    CheckpointLoad { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
