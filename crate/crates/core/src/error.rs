//! Crate-wide error type.

#[derive(Debug, thiserror::Error)]
pub enum TpcError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite gradient at layer {layer} on inference iteration {iteration}")]
    NonFiniteGradient { layer: usize, iteration: usize },
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("invalid usage: {0}")]
    Usage(String),
    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TpcError>;
