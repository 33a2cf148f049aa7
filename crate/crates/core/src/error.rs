use thiserror::Error;

/// Errors raised anywhere in the completion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes disagree; `detail` names the offending axes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// API misuse, e.g. differentiating a tensor that was never recorded.
    #[error("usage error: {0}")]
    Usage(String),

    /// A metric or loss cannot be evaluated on the given data.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
