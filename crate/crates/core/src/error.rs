use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum AmfError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad tensor container: {0}")]
    Container(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AmfError>;

impl AmfError {
    pub fn shape(msg: impl Into<String>) -> Self {
        AmfError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        AmfError::InvalidArgument(msg.into())
    }
}
