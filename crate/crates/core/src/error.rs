use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("format error in {field}: {msg}")]
    Format { field: String, msg: String },

    #[error("degenerate alignment target: row {row} has zero norm")]
    DegenerateTarget { row: usize },

    #[error("tokenizer error: word {0:?} is not in the vocabulary")]
    OutOfVocabulary(String),

    #[error("non-finite loss at step {step}: first bad component is {component}")]
    NonFinite { step: u64, component: String },

    #[error("checkpoint config hash mismatch: checkpoint has {found}, run expects {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("checksum mismatch: header records {expected}, payload hashes to {found}")]
    Checksum { expected: String, found: String },

    #[error("unknown {kind} {name:?}; available: {available}")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
