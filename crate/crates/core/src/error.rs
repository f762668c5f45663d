//! Shared error type for the library surface.

/// Errors raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input that makes the operation mathematically undefined
    /// (zero vector into a normalization, empty ground truth, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A parameter outside its admissible range (non-positive temperature,
    /// rank threshold outside (0, 1], ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Dimensions of operands do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Malformed or inconsistent data (out-of-vocabulary token, bad
    /// interval, feature file of the wrong length, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A computation produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
