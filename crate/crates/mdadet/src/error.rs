//! Error type shared across the crate, with exit-code categories for the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration (rejected before any compute starts).
    #[error("config error: {0}")]
    Config(String),

    /// An argument or input value violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file or dataset could not be read or parsed.
    #[error("load error: {0}")]
    Load(String),

    /// Array shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// NaN/Inf or another numeric failure, tagged with where it happened.
    #[error("numeric error at {location}: {message}")]
    Numeric { location: String, message: String },

    /// Anything else that went wrong mid-run.
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numeric(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            message: message.into(),
        }
    }

    /// Process exit code category: 2 config/validation, 3 load/io,
    /// 4 shape/numeric, 5 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) => 2,
            Error::Load(_) | Error::Io(_) | Error::Json(_) => 3,
            Error::Shape(_) | Error::Numeric { .. } => 4,
            Error::Runtime(_) => 5,
        }
    }
}
