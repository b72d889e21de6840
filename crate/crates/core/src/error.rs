use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty text")]
    EmptyText,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("nothing to compare")]
    NothingToCompare,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown token id {0}")]
    UnknownId(usize),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("prompt of length {len} leaves no room in a context of {max_len}")]
    PromptTooLong { len: usize, max_len: usize },

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("non-finite loss at epoch {epoch}, step {step}: {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("layer {layer} out of range for a model with {num_layers} layers")]
    LayerOutOfRange { layer: usize, num_layers: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: negative label {label}")]
    NegativeLabel { line: usize, label: i64 },

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file")]
    TruncatedFile,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("causal mask violated at position {0}")]
    CausalityViolation(usize),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyCorpus => "empty_corpus",
            Error::EmptyDataset => "empty_dataset",
            Error::EmptyText => "empty_text",
            Error::EmptyInput(_) => "empty_input",
            Error::NothingToCompare => "nothing_to_compare",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownId(_) => "unknown_id",
            Error::IdOutOfRange { .. } => "id_out_of_range",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::PromptTooLong { .. } => "prompt_too_long",
            Error::NonFiniteInput => "non_finite_input",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::LayerOutOfRange { .. } => "layer_out_of_range",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Parse { .. } => "parse",
            Error::NegativeLabel { .. } => "negative_label",
            Error::BadMagic => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::TruncatedFile => "truncated_file",
            Error::Checkpoint(_) => "checkpoint",
            Error::CausalityViolation(_) => "causality_violation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
