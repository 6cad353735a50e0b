use thiserror::Error;

#[derive(Error, Debug)]
pub enum FceError {
    #[error("shape mismatch in `{primitive}`: {detail}")]
    ShapeMismatch { primitive: String, detail: String },
    #[error("non-finite value produced by `{0}`")]
    NonFinite(String),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("head index {head} out of range (model has {n_heads} heads)")]
    HeadOutOfRange { head: usize, n_heads: usize },
    #[error("{0} has no closed-form log-density")]
    UnsupportedDensity(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FceError>;
