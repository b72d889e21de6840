//! Sentence-level shortening: drop the longer sentence of the most similar
//! pair until enough tokens are gone.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{invalid, Error, Result};
use crate::tensor::{dot, Matrix, Scalar};
use crate::text::{split_sentences, tokenize, words, LabeledDataset, LabeledRecord, TokenizeMode, Vocab};

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEmbedding {
    /// Unit norm.
    pub vector: Vec<f64>,
    pub token_count: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Elimination {
    pub pair: (usize, usize),
    pub similarity: f64,
    pub eliminated: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimilarityPlan {
    pub eliminations: Vec<Elimination>,
    /// Surviving sentence indices in original order.
    pub kept: Vec<usize>,
    /// Eliminated tokens over all tokens.
    pub achieved_reduction: f64,
}

pub fn normalize_vector(v: &mut [f64]) -> Result<()> {
    let norm = dot(v, v).sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::NonFiniteInput);
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(())
}

/// Mean of the final-layer vectors of the content tokens, unit-normalized.
pub fn sentence_embedding<T: Scalar>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    sentence: &str,
    index: usize,
) -> Result<SentenceEmbedding> {
    let seq = tokenize(sentence, vocab, model.config().max_len, TokenizeMode::Classifier)?;
    if seq.content_len() == 0 {
        return Err(Error::EmptyText);
    }
    let hidden = model.token_vectors(&seq)?;
    let mut mean = vec![0.0; hidden.cols()];
    for i in seq.content.clone() {
        for (m, &h) in mean.iter_mut().zip(hidden.row(i)) {
            *m += h.as_f64();
        }
    }
    let m = seq.content_len() as f64;
    mean.iter_mut().for_each(|x| *x /= m);
    normalize_vector(&mut mean)?;
    Ok(SentenceEmbedding { vector: mean, token_count: words(sentence).len(), index })
}

/// Pairwise cosine similarities of unit vectors.
pub fn similarity_matrix(embeddings: &[SentenceEmbedding]) -> Result<Matrix<f64>> {
    if embeddings.len() < 2 {
        return Err(Error::NothingToCompare);
    }
    let dim = embeddings[0].vector.len();
    if embeddings.iter().any(|e| e.vector.len() != dim) {
        return Err(Error::ShapeMismatch("embeddings differ in dimension".into()));
    }
    let s = embeddings.len();
    let mut m = Matrix::zeros(s, s);
    for i in 0..s {
        for j in i..s {
            let c = dot(&embeddings[i].vector, &embeddings[j].vector);
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    Ok(m)
}

/// Greedy elimination over a precomputed similarity matrix.
pub fn plan_eliminations(token_counts: &[usize], sim: &Matrix<f64>, target_reduction: f64) -> Result<SimilarityPlan> {
    if !(target_reduction > 0.0 && target_reduction < 1.0) {
        return Err(invalid(format!("target_reduction {target_reduction} outside (0, 1)")));
    }
    let s = token_counts.len();
    if s <= 1 {
        return Ok(SimilarityPlan { eliminations: vec![], kept: (0..s).collect(), achieved_reduction: 0.0 });
    }
    if sim.shape() != (s, s) {
        return Err(Error::ShapeMismatch(format!("{s} sentences but a {}x{} similarity matrix", sim.rows(), sim.cols())));
    }
    if !sim.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let total: usize = token_counts.iter().sum();
    let mut alive = vec![true; s];
    let mut removed = 0usize;
    let mut eliminations = Vec::new();
    let reduction = |removed: usize| if total == 0 { 0.0 } else { removed as f64 / total as f64 };
    while reduction(removed) < target_reduction && alive.iter().filter(|&&a| a).count() > 1 {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..s {
            for j in i + 1..s {
                if alive[i] && alive[j] && best.is_none_or(|(bi, bj)| sim[(i, j)] > sim[(bi, bj)]) {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("two survivors form a pair");
        let eliminated = if token_counts[i] > token_counts[j] { i } else { j };
        alive[eliminated] = false;
        removed += token_counts[eliminated];
        eliminations.push(Elimination { pair: (i, j), similarity: sim[(i, j)], eliminated });
    }
    Ok(SimilarityPlan {
        eliminations,
        kept: (0..s).filter(|&i| alive[i]).collect(),
        achieved_reduction: reduction(removed),
    })
}

pub fn eliminate_similar(embeddings: &[SentenceEmbedding], target_reduction: f64) -> Result<SimilarityPlan> {
    let counts: Vec<usize> = embeddings.iter().map(|e| e.token_count).collect();
    if embeddings.len() < 2 {
        return plan_eliminations(&counts, &Matrix::zeros(0, 0), target_reduction);
    }
    plan_eliminations(&counts, &similarity_matrix(embeddings)?, target_reduction)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextReduction {
    pub text: String,
    pub kept_sentences: usize,
    pub orig_sentences: usize,
    pub kept_tokens: usize,
    pub orig_tokens: usize,
}

/// Shortens one text. Text with nothing eliminated is returned verbatim.
pub fn shorten_text<T: Scalar>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    text: &str,
    target_reduction: f64,
) -> Result<(TextReduction, SimilarityPlan)> {
    let sentences = split_sentences(text);
    let embeddings = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| sentence_embedding(model, vocab, s, i))
        .collect::<Result<Vec<_>>>()?;
    let plan = eliminate_similar(&embeddings, target_reduction)?;
    let orig_tokens = embeddings.iter().map(|e| e.token_count).sum();
    let kept_tokens = plan.kept.iter().map(|&i| embeddings[i].token_count).sum();
    let text = if plan.eliminations.is_empty() {
        text.to_string()
    } else {
        plan.kept.iter().map(|&i| sentences[i].as_str()).collect::<Vec<_>>().join(" ")
    };
    Ok((
        TextReduction { text, kept_sentences: plan.kept.len(), orig_sentences: sentences.len(), kept_tokens, orig_tokens },
        plan,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimFilteredRow {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text2: Option<String>,
    pub label: usize,
    pub kept_sentences: usize,
    pub orig_sentences: usize,
    pub achieved_reduction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFilteredDataset {
    pub dataset: LabeledDataset,
    pub rows: Vec<SimFilteredRow>,
    /// One plan per text field (two for pair records), in record order.
    pub plans: Vec<Vec<SimilarityPlan>>,
    pub mean_reduction: f64,
}

impl SimFilteredDataset {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::text::write_jsonl(path, &self.rows)
    }
}

/// Applies [`shorten_text`] to every record; both fields of a pair record are
/// shortened independently.
pub fn similarity_filter_dataset<T: Scalar>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    dataset: &LabeledDataset,
    target_reduction: f64,
) -> Result<SimFilteredDataset> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(dataset.len());
    let mut plans = Vec::with_capacity(dataset.len());
    for rec in &dataset.records {
        let mut parts = vec![shorten_text(model, vocab, &rec.text, target_reduction)?];
        if let Some(t2) = &rec.text2 {
            parts.push(shorten_text(model, vocab, t2, target_reduction)?);
        }
        let orig: usize = parts.iter().map(|(r, _)| r.orig_tokens).sum();
        let kept: usize = parts.iter().map(|(r, _)| r.kept_tokens).sum();
        rows.push(SimFilteredRow {
            text: parts[0].0.text.clone(),
            text2: parts.get(1).map(|(r, _)| r.text.clone()),
            label: rec.label,
            kept_sentences: parts.iter().map(|(r, _)| r.kept_sentences).sum(),
            orig_sentences: parts.iter().map(|(r, _)| r.orig_sentences).sum(),
            achieved_reduction: if orig == 0 { 0.0 } else { (orig - kept) as f64 / orig as f64 },
        });
        plans.push(parts.into_iter().map(|(_, p)| p).collect());
    }
    let mean_reduction = rows.iter().map(|r| r.achieved_reduction).sum::<f64>() / rows.len() as f64;
    let records = rows
        .iter()
        .map(|r| LabeledRecord { text: r.text.clone(), text2: r.text2.clone(), label: r.label })
        .collect();
    Ok(SimFilteredDataset { dataset: LabeledDataset::new(records, dataset.num_classes)?, rows, plans, mean_reduction })
}
