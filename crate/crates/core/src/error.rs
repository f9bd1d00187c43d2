//! Error type shared across the crate, with process exit codes for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SmacError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value in {context}: {value}")]
    NonFinite { context: String, value: f64 },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty history: encoder needs at least one (s, a, r) triple")]
    EmptyHistory,

    #[error("buffer underflow in {context}: need {need}, have {have}")]
    BufferUnderflow {
        context: &'static str,
        need: usize,
        have: usize,
    },

    #[error("true reward requested from a reward-free environment (task {task_id})")]
    RewardAccess { task_id: u32 },

    #[error("transition for task {got} appended to buffer of task {expected}")]
    TaskMixup { expected: u32, got: u32 },

    #[error("environment error: {0}")]
    Env(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SmacError>;

impl SmacError {
    /// Exit code the CLI reports for this error: 2 config, 3 data/io,
    /// 4 numeric divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SmacError::InvalidConfig(_) => 2,
            SmacError::Data(_) | SmacError::Io(_) | SmacError::Json(_) => 3,
            SmacError::NonFinite { .. } | SmacError::Diverged(_) => 4,
            _ => 1,
        }
    }
}
