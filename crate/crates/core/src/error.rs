use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("location {0:?} is not in the user's vocabulary")]
    UnknownLocation(String),

    #[error("negative activity duration {duration} h at activity {index} of day {day}")]
    NegativeDuration { day: String, index: usize, duration: f64 },

    #[error("forward pass underflow at step {step}")]
    Underflow { step: usize },

    #[error("singular system in {0}")]
    Singular(String),

    #[error("non-finite parameter in {0}")]
    NonFinite(String),

    #[error("EM failed at iteration {iteration}: {source}")]
    Em {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
