use thiserror::Error;

/// Library-wide error type. `InvalidInput` and `Domain` indicate caller
/// mistakes; `Numerical` indicates an internal routine failed to reach its
/// accuracy contract and carries the achieved diagnostic.
#[derive(Debug, Clone, Error)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;
