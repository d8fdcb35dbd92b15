use thiserror::Error;

/// Errors raised anywhere in the simulation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shape or dimension disagreement between models and data.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A configuration value is out of its valid domain. The first field
    /// names the offending key.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    /// CSV parsing failure; `row` is the 1-based data row (header excluded).
    #[error("csv error at row {row}: {reason}")]
    Csv { row: usize, reason: String },

    /// A NaN or infinity appeared in model parameters.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("{0}")]
    Unsupported(String),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
