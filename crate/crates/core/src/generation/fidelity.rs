use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{invalid, Error, Result};
use crate::tensor::Scalar;
use crate::text::{tokenize, TokenizeMode, Vocab};

/// One line of generated output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedText {
    pub intended_label: Option<usize>,
    pub text: String,
    pub seed: u64,
}

/// Fraction of generated texts the classifier assigns to their intended
/// label.
pub fn generation_fidelity_eval<T: Scalar>(
    classifier: &EncoderModel<T>,
    vocab: &Vocab,
    generated: &[GeneratedText],
) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptyInput("generated texts"));
    }
    let mut hits = 0usize;
    for (i, g) in generated.iter().enumerate() {
        let label = g.intended_label.ok_or_else(|| invalid(format!("generated text {i} has no intended_label")))?;
        let seq = tokenize(&g.text, vocab, classifier.config().max_len, TokenizeMode::Classifier)?;
        hits += usize::from(classifier.predict(&seq)? == label);
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// Fidelity for the two prompting regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub with_label: f64,
    pub without_label: f64,
}
