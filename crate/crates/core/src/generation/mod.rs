//! Keyword-conditioned generation: records built from high-attention tokens,
//! a small causal language model, constrained sampling, and a classifier-based
//! fidelity check.

pub mod fidelity;
pub mod lm;
pub mod record;
pub mod sampler;

pub use fidelity::{generation_fidelity_eval, FidelityReport, GeneratedText};
pub use lm::{train_lm, LmConfig, LmModel};
pub use record::{build_gen_record, build_lm_vocab, label_token, GenRecord};
pub use sampler::{constrain_logits, constrain_logits_traced, sample, Constrained, Generation, SamplerConfig};
