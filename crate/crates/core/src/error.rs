//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

use crate::runtime::HeadLocator;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("tensor `{name}` is missing from the manifest")]
    MissingTensor { name: String },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{name}` failed integrity check: {reason}")]
    Checksum { name: String, reason: String },

    #[error("token id {id} is out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("head {head} is out of bounds for a model with {n_layers} layers x {n_heads} heads")]
    HeadOutOfBounds {
        head: HeadLocator,
        n_layers: usize,
        n_heads: usize,
    },

    #[error("layer {layer} is out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("vector has length {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("head {0} appears more than once in one patch set")]
    DuplicatePatch(HeadLocator),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("cannot tokenize {text:?}: no vocabulary entry matches at byte {offset}")]
    Untokenizable { text: String, offset: usize },

    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("insufficient pairs: need {needed}, have {available} ({context})")]
    InsufficientPairs {
        needed: usize,
        available: usize,
        context: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("zero-norm activation vector for prompt {prompt_id}")]
    ZeroNorm { prompt_id: String },

    #[error("{0}")]
    Analysis(String),

    #[error("missing upstream artifact {path}; run stage `{stage}` first")]
    MissingUpstream { stage: String, path: PathBuf },

    #[error("invalid experiment config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
