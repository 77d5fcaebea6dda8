use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum FfpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite numeric input: {0}")]
    NumericInput(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("non-finite {component} at step {step}")]
    NonFinite { component: String, step: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl FfpError {
    /// Stable machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            FfpError::InvalidArgument(_) => "invalid-argument",
            FfpError::NumericInput(_) => "numeric-input",
            FfpError::Configuration(_) => "configuration",
            FfpError::NonFinite { .. } => "non-finite",
            FfpError::Format(_) => "format",
            FfpError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, FfpError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(FfpError::InvalidArgument(msg.into()))
}
