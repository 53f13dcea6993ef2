//! Shared error type for the whole crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: shape {shape:?} does not match {len} data elements")]
    ShapeDataMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: sequence has zero valid frames")]
    EmptySequence { op: &'static str },

    #[error("{0}")]
    Config(String),

    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("target of length {target_len} (needs {min_frames} frames) cannot align to {frames} frames")]
    InfeasibleTarget {
        target_len: usize,
        min_frames: usize,
        frames: usize,
    },

    #[error("replacement plan invalid: {0}")]
    Plan(String),

    #[error("optimizer grouping invalid: {0}")]
    Grouping(String),

    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("slope fit needs at least {needed} usable lengths, got {got}")]
    Fit { needed: usize, got: usize },

    #[error("duplicate parameter name: {0}")]
    DuplicateParam(String),

    #[error("unknown parameter: {0}")]
    UnknownParam(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
