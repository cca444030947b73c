use thiserror::Error;

/// Errors across the toolkit. `Config` maps to CLI exit code 1, everything
/// else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("numerical error in `{param}`: {detail}")]
    Numerical { param: String, detail: String },

    #[error("target of length {target_len} not alignable in {frames} frames")]
    InfeasibleTarget { target_len: usize, frames: usize },

    #[error("mask layout mismatch: mask bound to {expected}, store is {actual}")]
    MaskBinding { expected: String, actual: String },

    #[error("mask file format error: {0}")]
    MaskFormat(String),

    #[error("run diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("record parse error in {path}: {detail}")]
    RecordParse { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Shape(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
