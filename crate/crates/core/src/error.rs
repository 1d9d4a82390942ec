//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An API precondition was violated (empty population, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Model or experiment configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad user-supplied input (unsupported glyph, missing file, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A dataset file failed to parse.
    #[error("parse error at record {record}: {msg}")]
    Parse { record: usize, msg: String },

    /// Numerical failure (NaN/Inf) during simulation or integration.
    #[error("numerical error at step {step}: {msg}")]
    Numeric { step: usize, msg: String },

    /// Training aborted.
    #[error("training error at step {step}: {msg}")]
    Train { step: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Process exit code for the CLI: 2 for bad input/config, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Contract(_)
            | Error::Config(_)
            | Error::Input(_)
            | Error::Parse { .. } => 2,
            Error::Numeric { .. } | Error::Train { .. } | Error::Io(_) | Error::Json(_) => 3,
        }
    }
}
