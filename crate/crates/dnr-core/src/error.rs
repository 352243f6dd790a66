//! Shared error type for the library crates.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: String, right: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("parameter `{name}` already registered with shape {existing}, got {new}")]
    ParamShapeConflict { name: String, existing: String, new: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    MissingPrereq(String),

    #[error("data: {0}")]
    Data(String),

    #[error("data: malformed row at line {line}: {reason}")]
    CsvRow { line: u64, reason: String },

    #[error("dataset vanished under filter (min_interactions={threshold})")]
    FilterEmpty { threshold: usize },

    #[error("model: {0}")]
    Model(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged { epoch: usize, batch: usize, source: Box<Error> },

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Human-readable shape like "3x4" for error messages.
    pub fn shape_str(shape: (usize, usize)) -> String {
        format!("{}x{}", shape.0, shape.1)
    }
}
