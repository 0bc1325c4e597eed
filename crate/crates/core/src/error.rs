use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DabsError>;

#[derive(Debug, Error)]
pub enum DabsError {
    /// Operand extents do not fit the operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed or out-of-range user input (tokens, spans, labels, records).
    #[error("input error: {0}")]
    Input(String),

    /// Inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Binary file decoding failure.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training error in parameter `{param}`: {message}")]
    Training { param: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DabsError {
    /// Stable short name for machine-readable reporting.
    pub fn kind(&self) -> &'static str {
        match self {
            DabsError::Shape(_) => "shape",
            DabsError::Domain(_) => "domain",
            DabsError::Input(_) => "input",
            DabsError::Config(_) => "config",
            DabsError::Format { .. } => "format",
            DabsError::Training { .. } => "training",
            DabsError::Io(_) => "io",
            DabsError::Json(_) => "json",
        }
    }
}
