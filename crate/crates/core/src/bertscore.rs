//! Greedy-matching similarity between a reference and a candidate text.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::simfilter::normalize_vector;
use crate::tensor::{dot, Scalar};
use crate::text::{tokenize, TokenizeMode, Vocab};

/// Anything that maps a text to one vector per content token.
pub trait TokenEmbedder {
    fn token_embeddings(&self, text: &str) -> Result<Vec<Vec<f64>>>;
}

/// Final-layer vectors of an encoder, markers excluded.
pub struct EncoderEmbedder<'a, T: Scalar> {
    pub model: &'a EncoderModel<T>,
    pub vocab: &'a Vocab,
}

impl<T: Scalar> TokenEmbedder for EncoderEmbedder<'_, T> {
    fn token_embeddings(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        let seq = tokenize(text, self.vocab, self.model.config().max_len, TokenizeMode::Classifier)?;
        if seq.content_len() == 0 {
            return Err(Error::EmptyText);
        }
        let hidden = self.model.token_vectors(&seq)?;
        Ok(seq.content.clone().map(|i| hidden.row(i).iter().map(|v| v.as_f64()).collect()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScoreTriple {
    /// `f1` is `2PR / (P + R)`, and 0 when `P + R = 0`.
    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall != 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1 }
    }
}

fn unit_rows(rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if rows.is_empty() {
        return Err(Error::EmptyText);
    }
    rows.iter()
        .map(|r| {
            let mut r = r.clone();
            normalize_vector(&mut r)?;
            Ok(r)
        })
        .collect()
}

/// Mean over `from` of the best cosine match in `to`.
fn greedy_mean(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|a| to.iter().map(|b| dot(a, b)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    total / from.len() as f64
}

/// Scores from raw token vectors; rows are unit-normalized first.
pub fn score_vectors(reference: &[Vec<f64>], candidate: &[Vec<f64>]) -> Result<ScoreTriple> {
    let x = unit_rows(reference)?;
    let x_hat = unit_rows(candidate)?;
    if x.iter().chain(&x_hat).any(|r| r.len() != x[0].len()) {
        return Err(Error::ShapeMismatch("token vectors differ in dimension".into()));
    }
    Ok(ScoreTriple::new(greedy_mean(&x_hat, &x), greedy_mean(&x, &x_hat)))
}

pub fn pair_score(embedder: &impl TokenEmbedder, reference: &str, candidate: &str) -> Result<ScoreTriple> {
    score_vectors(&embedder.token_embeddings(reference)?, &embedder.token_embeddings(candidate)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusScore {
    pub mean: ScoreTriple,
    pub pairs: Vec<ScoreTriple>,
}

/// Per-pair scores and their arithmetic means (F1 averaged directly).
pub fn corpus_score<S: AsRef<str>>(embedder: &impl TokenEmbedder, pairs: &[(S, S)]) -> Result<CorpusScore> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("score pairs"));
    }
    let scores = pairs
        .iter()
        .map(|(r, c)| pair_score(embedder, r.as_ref(), c.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    let mean = ScoreTriple {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    };
    Ok(CorpusScore { mean, pairs: scores })
}

/// `id,precision,recall,f1`, one row per pair followed by a `mean` row.
pub fn write_scores_csv(path: impl AsRef<Path>, score: &CorpusScore) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "id,precision,recall,f1")?;
    for (i, s) in score.pairs.iter().enumerate() {
        writeln!(w, "{i},{},{},{}", s.precision, s.recall, s.f1)?;
    }
    let m = score.mean;
    writeln!(w, "mean,{},{},{}", m.precision, m.recall, m.f1)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_is_the_harmonic_mean() {
        let s = ScoreTriple::new(1.0, 0.5);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ScoreTriple::new(0.0, 0.0).f1, 0.0);
        assert_eq!(ScoreTriple::new(0.5, -0.5).f1, 0.0);
        // Anti-aligned texts keep a negative score instead of collapsing to 0.
        assert!((ScoreTriple::new(-0.5, -0.5).f1 + 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_reference_tokens_one_candidate() {
        let s = score_vectors(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![1.0, 0.0]]).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn vectors_are_normalized_before_matching() {
        let s = score_vectors(&[vec![3.0, 0.0]], &[vec![0.5, 0.0]]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_side_is_an_error() {
        assert!(matches!(score_vectors(&[vec![1.0]], &[]), Err(Error::EmptyText)));
    }
}
