use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NhlError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("layer index {index} out of range {lo}..={hi}")]
    LayerOutOfRange { index: usize, lo: usize, hi: usize },

    #[error("norm exponent must lie in [2, inf], got {0}")]
    InvalidExponent(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("operation requires {0}")]
    Unsupported(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for NhlError {
    fn from(e: std::io::Error) -> Self {
        NhlError::Io(e.to_string())
    }
}

impl From<csv::Error> for NhlError {
    fn from(e: csv::Error) -> Self {
        NhlError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, NhlError>;
