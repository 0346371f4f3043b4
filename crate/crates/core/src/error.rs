use thiserror::Error;

/// Errors raised across the library and the experiment harness.
#[derive(Debug, Error)]
pub enum UqError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl UqError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        UqError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, UqError>;
