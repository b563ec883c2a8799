use thiserror::Error;

/// Error type shared by all solver and objective code.
#[derive(Error, Debug)]
pub enum CoreError {
    #[error("dimension mismatch for {field}: expected {expected}, got {got}")]
    DimensionMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {field}")]
    NonFinite { field: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sample index {index} out of range [0, {n})")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("inner solver diverged at sample {sample}: non-finite iterate")]
    InnerDiverged { sample: usize },

    #[error("empty batch at iteration {t}")]
    EmptyBatch { t: usize },

    #[error("objective does not support {0}")]
    Unsupported(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
