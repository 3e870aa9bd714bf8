use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error("matrix is not positive definite even with jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },

    #[error("unknown id {id} in vocabulary `{vocabulary}`")]
    UnknownId { vocabulary: String, id: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("decision distribution for input column {column} sums to {sum}")]
    NotNormalized { column: usize, sum: f64 },

    #[error("zero logging propensity at interaction {index}")]
    ZeroPropensity { index: usize },

    #[error("every candidate has already been deployed")]
    AllDeployed,

    #[error("incompatible model: {0}")]
    Incompatible(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
