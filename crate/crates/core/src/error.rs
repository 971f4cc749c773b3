//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed line {line} in {path}: {msg}")]
    MalformedLine {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("duplicate sample id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },

    #[error("rejected samples with empty text: {}", ids.join(", "))]
    EmptySamples { ids: Vec<String> },

    #[error("corpus must contain at least one sample")]
    EmptyCorpus,

    #[error("score vector does not cover the corpus; missing ids: {}", missing.join(", "))]
    ScoreCoverage { missing: Vec<String> },

    #[error("negative weight {value} for sample {id:?}")]
    NegativeWeight { id: String, value: f64 },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("degenerate sample{}: token sequence shorter than 2", id.as_deref().map(|i| format!(" {i:?}")).unwrap_or_default())]
    DegenerateSample { id: Option<String> },

    #[error("evaluation corpus is empty")]
    EmptyEval,

    #[error("non-finite values during {phase} at step {step}")]
    Divergence { phase: String, step: usize },

    #[error("insufficient proxy data: have {have} samples, need at least {need}")]
    InsufficientProxy { have: usize, need: usize },

    #[error("invalid configuration: {msg}")]
    Config { msg: String },

    #[error("{msg}")]
    Domain { msg: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain { msg: msg.into() }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config { msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
