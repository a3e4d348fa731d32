//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("backward root is not a scalar (shape {shape:?})")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("graph input `{0}` was not bound")]
    UnboundInput(String),

    #[error("no tokens left after tokenizing {0:?}")]
    EmptyTokenization(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("unknown token {0:?} for this vocabulary")]
    UnknownToken(String),

    #[error("degenerate model output: zero-norm vector")]
    ZeroNormOutput,

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("perturbation does not belong to this text (hash {got}, expected {expected})")]
    HashMismatch { expected: String, got: String },

    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),

    #[error("text too short: {eligible} eligible positions, {requested} edits requested")]
    TextTooShort { eligible: usize, requested: usize },

    #[error("vocabulary of {size} tokens is too small for k={k} synonyms")]
    VocabTooSmall { size: usize, k: usize },

    #[error("{measure} undefined: {reason}")]
    UndefinedStatistic {
        measure: &'static str,
        reason: String,
    },

    #[error("epsilon {value} outside (0, {max}]")]
    EpsilonOutOfRange { value: f64, max: f64 },

    #[error("truncation would drop the edit marker at position {position}")]
    MarkerTruncated { position: usize },

    #[error("need at least 2 distinct texts to split, found {0}")]
    TooFewTexts(usize),

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("model file {path} is invalid: {reason}")]
    ModelFormat { path: String, reason: String },

    #[error(
        "vocabulary mismatch: scorer was trained with vocabulary {model} but the dataset \
         was built with {dataset}; rebuild the dataset with the scorer's vocabulary"
    )]
    VocabMismatch { model: String, dataset: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    InvalidConfig(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an io error with the path it occurred on.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
