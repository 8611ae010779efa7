use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("task {0}: no ground-truth tests (t_q = 0)")]
    GroundTruthMissing(String),

    #[error("task {0}: no generated test columns (m = 0)")]
    NoGeneratedTests(String),

    #[error("task {0}: no valid code candidates")]
    NoValidCandidates(String),

    #[error("reward group is empty")]
    EmptyGroup,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported stdio value shape: {0}")]
    UnsupportedShape(String),

    #[error("subsample {requested} exceeds available {available} ({axis})")]
    SubsampleTooLarge {
        axis: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("index {index} out of range for {axis} of size {size}")]
    IndexOutOfRange {
        axis: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("interpreter or runtime unavailable: {0}")]
    Environment(String),

    #[error("failed to spawn candidate program: {0}")]
    Spawn(#[source] io::Error),

    #[error("prompt rendering failed: {0}")]
    Prompt(String),

    #[error("authentication rejected by provider: {0}")]
    Auth(String),

    #[error("gateway request failed after {attempts} attempt(s): {message}")]
    Gateway { attempts: u32, message: String },

    #[error("malformed record at line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}
