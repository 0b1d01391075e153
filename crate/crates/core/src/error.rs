use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("zero noise multiplier: privacy loss is infinite")]
    InfinitePrivacyLoss,

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("value out of fixed-point range: {0}")]
    Range(String),

    #[error("modulus overflow: {0}")]
    Overflow(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by a bad configuration or bad user input.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
