use thiserror::Error;

/// Errors produced across the estimation and localization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid direction: {0}")]
    InvalidDirection(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate combiner in frame {frame}: W^H W is not positive definite")]
    DegenerateCombiner { frame: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("dictionary too large for the flattened solver: {atoms} atoms ({reason})")]
    Capacity { atoms: u128, reason: String },

    #[error("observation contains non-finite samples")]
    NonFiniteObservation,

    #[error("position is not observable: {0}")]
    Unlocalizable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
