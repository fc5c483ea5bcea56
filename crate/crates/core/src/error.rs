use thiserror::Error;

pub type Result<T> = std::result::Result<T, TflowError>;

#[derive(Debug, Error)]
pub enum TflowError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("sequence length {len} exceeds limit {max}")]
    SequenceLength { len: usize, max: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("patch lifecycle error: {0}")]
    Lifecycle(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("checkpoint format error at tensor `{tensor}`: {reason}")]
    Format { tensor: String, reason: String },

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TflowError {
    /// True for errors caused by bad user-supplied configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, TflowError::Config(_) | TflowError::Json(_))
    }
}
