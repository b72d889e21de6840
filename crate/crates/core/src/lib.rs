//! Small from-scratch transformers for attention-guided input shortening,
//! keyword-conditioned generation and embedding-similarity scoring.

pub mod autograd;
pub mod bertscore;
pub mod encoder;
pub mod error;
pub mod filter;
pub mod generation;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod simfilter;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transformer;

pub use encoder::{AttentionTensor, EncoderConfig, EncoderModel, EncoderOutput};
pub use error::{Error, Result};
pub use optim::{AdamW, TrainConfig};
pub use tensor::{Matrix, Scalar};
pub use text::{LabeledDataset, LabeledRecord, TokenizeMode, TokenizedSequence, Vocab};
