use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("fully masked distribution")]
    FullyMasked,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("degenerate covariance")]
    DegenerateCovariance,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown character {0:?} not in vocabulary")]
    UnknownCharacter(char),
    #[error("no visible positions in attention context")]
    NoVisiblePositions,
    #[error("position {position} exceeds max_positions {max}")]
    PositionOverflow { position: usize, max: usize },
    #[error("training diverged at step {step}: loss {loss} > 10 x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("weight file: {0}")]
    WeightFormat(String),
    #[error("weight file field `{field}` mismatch: file has {found}, expected {expected}")]
    ConfigMismatch {
        field: &'static str,
        found: String,
        expected: String,
    },
    #[error("insufficient demonstrations: need {needed}, have {available}")]
    InsufficientDemos { needed: usize, available: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
