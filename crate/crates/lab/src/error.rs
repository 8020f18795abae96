use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// A configuration field is invalid; maps to exit code 2.
    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] tpo_core::CoreError),
    #[error(transparent)]
    Nn(#[from] tpo_nn::NnError),
}

impl LabError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config { field: field.into(), message: message.into() }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Format(e.to_string())
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
