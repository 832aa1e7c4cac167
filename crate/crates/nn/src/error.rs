use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid layer configuration: {0}")]
    Config(String),
    #[error("backward called on `{0}` without a cached forward pass")]
    NoCache(&'static str),
}

pub type Result<T> = std::result::Result<T, NnError>;
