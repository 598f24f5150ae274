//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the attempted operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric failure: non-finite loss, divergence, NaN in a gradient.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Configuration file or parameter problem.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint file problems, each with a distinct message.
    #[error("unrecognized checkpoint: bad magic bytes")]
    CheckpointMagic,
    #[error("checkpoint version mismatch: found {found}, reader supports {supported}")]
    CheckpointVersion { found: u32, supported: u32 },
    #[error("truncated checkpoint: {0}")]
    CheckpointTruncated(String),
    #[error("checkpoint architecture mismatch: {0}")]
    CheckpointArch(String),

    /// Dataset file problems.
    #[error("data format error: {0}")]
    DataFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 0 success, 2 config error, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
