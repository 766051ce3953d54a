use thiserror::Error;

/// Errors produced by the identification pipeline.
#[derive(Debug, Error)]
pub enum KoopmanError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing input data: {0}")]
    MissingInput(String),

    #[error("wrong estimator for this snapshot set: {0}")]
    WrongEstimator(String),

    #[error("invalid truncation rule: {0}")]
    Rule(String),

    #[error("observable spec error: {0}")]
    Spec(String),

    #[error("closure error: term `{term}` cannot be rebuilt from the output space: {reason}")]
    Closure { term: String, reason: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KoopmanError>;
