use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate vector (zero norm)")]
    DegenerateVector,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no mentioned entities")]
    NoMentionedEntities,

    #[error("unknown item: entity {0} is not in the item set")]
    UnknownItem(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("missing required field `{field}` at line {line}")]
    MissingField { field: String, line: usize },

    #[error("unsatisfiable corpus constraint after {0} attempts")]
    Unsatisfiable(usize),

    #[error("non-finite loss at batch {batch} of stage {stage}")]
    NonFinite { stage: String, batch: usize },

    #[error("stage mismatch: {0}")]
    Stage(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no n-grams of order {0} in the input")]
    NoNgrams(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
