use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at record {record}, feature {feature}")]
    NonFinite { record: usize, feature: usize },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("truncated input: {0}")]
    Truncated(String),

    #[error("unknown format: {0}")]
    UnknownFormat(String),

    #[error("task schedule overlaps on class {0}")]
    OverlappingSchedule(u32),

    #[error("class {0} is not present")]
    UnknownClass(u32),

    #[error("class {0} is already registered")]
    DuplicateClass(u32),

    #[error("no decoder head for task {0}")]
    UnknownTask(usize),

    #[error("decoder head for task {0} already exists")]
    HeadCollision(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigensolver did not converge for layer {layer} after {sweeps} sweeps")]
    EigenNoConvergence { layer: usize, sweeps: usize },

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("task {task}, phase {phase}: {source}")]
    Phase {
        task: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Wraps an error with the task index and pipeline phase it came from.
    pub fn in_phase(self, task: usize, phase: &'static str) -> Self {
        Error::Phase {
            task,
            phase,
            source: Box::new(self),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
