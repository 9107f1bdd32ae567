//! Crate-wide error type and result alias.

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("insufficient calibration data: {0}")]
    InsufficientCalibration(String),
    #[error("state error: {0}")]
    State(String),
    #[error("pipeline order: {0}")]
    PipelineOrder(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data format error: {0}")]
    DataFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable process exit code per error category, used by the CLI.
    pub fn category_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::DataFormat(_) => 3,
            Error::InvalidInput(_) | Error::InvalidParameter(_) | Error::ShapeMismatch { .. } => 4,
            Error::InsufficientData(_)
            | Error::EmptyInput(_)
            | Error::InsufficientCalibration(_) => 5,
            Error::State(_) | Error::PipelineOrder(_) => 6,
            Error::Io(_) => 7,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
