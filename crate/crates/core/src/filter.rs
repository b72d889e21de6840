//! Shortening sequences by the attention their tokens receive.

use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionTensor, EncoderModel};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Matrix, Scalar};
use crate::text::{tokenize, LabeledDataset, LabeledRecord, TokenizeMode, TokenizedSequence, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub layer: usize,
    pub keep_fraction: f64,
    #[serde(default = "default_min_keep")]
    pub min_keep: usize,
}

fn default_min_keep() -> usize {
    1
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self { layer: 0, keep_fraction: 0.5, min_keep: 1 }
    }
}

impl FilterSpec {
    pub fn new(layer: usize, keep_fraction: f64) -> Result<Self> {
        let spec = Self { layer, keep_fraction, min_keep: 1 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(invalid(format!("keep_fraction {} outside (0, 1]", self.keep_fraction)));
        }
        Ok(())
    }

    pub fn validate_for(&self, num_layers: usize) -> Result<()> {
        self.validate()?;
        if self.layer >= num_layers {
            return Err(Error::LayerOutOfRange { layer: self.layer, num_layers });
        }
        Ok(())
    }

    /// `max(min_keep, round(p·m))`, never more than `m`.
    pub fn keep_count(&self, m: usize) -> usize {
        keep_count(self.keep_fraction, self.min_keep, m)
    }
}

pub fn keep_count(keep_fraction: f64, min_keep: usize, m: usize) -> usize {
    // f64::round rounds half away from zero.
    let k = (keep_fraction * m as f64).round() as usize;
    k.max(min_keep).min(m)
}

/// Which model provides the attention used for filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterSource {
    Untrained,
    Trained,
}

/// Received-attention score per content token, in content order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    pub scores: Vec<f64>,
}

impl TokenScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Sum over heads of one layer's attention, in f64.
pub fn aggregate_layer<T: Scalar>(attn: &AttentionTensor<T>, layer: usize) -> Result<Matrix<f64>> {
    let heads = attn
        .weights
        .get(layer)
        .ok_or(Error::LayerOutOfRange { layer, num_layers: attn.num_layers() })?;
    let first = heads.first().ok_or(Error::EmptyInput("attention heads"))?;
    let mut agg = Matrix::zeros(first.rows(), first.cols());
    for h in heads {
        if h.shape() != agg.shape() {
            return Err(Error::ShapeMismatch("heads of one layer differ in shape".into()));
        }
        for (a, &w) in agg.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *a += w.as_f64();
        }
    }
    Ok(agg)
}

/// Column sums of `agg` over every row, restricted to the content positions
/// of `seq`. `agg` may be larger than `seq` when it came from a padded batch.
pub fn token_scores(agg: &Matrix<f64>, seq: &TokenizedSequence) -> Result<TokenScores> {
    if agg.rows() != agg.cols() || agg.rows() < seq.len() {
        return Err(Error::ShapeMismatch(format!(
            "aggregate is {}x{} for a sequence of length {}",
            agg.rows(),
            agg.cols(),
            seq.len()
        )));
    }
    let cols = agg.col_sums();
    let scores = cols[seq.content.clone()].to_vec();
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::NonFiniteInput);
    }
    Ok(TokenScores { scores })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub seq: TokenizedSequence,
    /// Kept content indices (0-based within the content), ascending.
    pub kept: Vec<usize>,
    /// The input had no content tokens; `seq` is `[CLS, SEP]`.
    pub empty_content: bool,
}

/// Indices of the `k` highest (or lowest) scores, ties to the lower index,
/// returned in ascending index order.
fn select(scores: &[f64], k: usize, highest: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = if highest { scores[b].total_cmp(&scores[a]) } else { scores[a].total_cmp(&scores[b]) };
        by_score.then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

fn filter_impl(seq: &TokenizedSequence, scores: &TokenScores, spec: &FilterSpec, highest: bool) -> Result<FilterOutcome> {
    spec.validate()?;
    let m = seq.content_len();
    if scores.len() != m {
        return Err(Error::ShapeMismatch(format!("{} scores for {m} content tokens", scores.len())));
    }
    if m == 0 {
        log::warn!("filtering a sequence with no content tokens");
        return Ok(FilterOutcome { seq: TokenizedSequence::classifier(vec![], vec![]), kept: vec![], empty_content: true });
    }
    let kept = select(&scores.scores, spec.keep_count(m), highest);
    let start = seq.content.start;
    let ids = kept.iter().map(|&i| seq.ids[start + i]).collect();
    let offsets = kept.iter().map(|&i| seq.offsets[start + i].clone()).collect();
    Ok(FilterOutcome { seq: TokenizedSequence::classifier(ids, offsets), kept, empty_content: false })
}

/// Keeps the highest-scoring content tokens in their original order.
pub fn filter_sequence(seq: &TokenizedSequence, scores: &TokenScores, spec: &FilterSpec) -> Result<FilterOutcome> {
    filter_impl(seq, scores, spec, true)
}

/// Keeps the lowest-scoring content tokens in their original order.
pub fn bottom_filter_sequence(seq: &TokenizedSequence, scores: &TokenScores, spec: &FilterSpec) -> Result<FilterOutcome> {
    filter_impl(seq, scores, spec, false)
}

/// Forward pass, aggregation and scoring for one unpadded sequence.
pub fn score_sequence<T: Scalar>(model: &EncoderModel<T>, seq: &TokenizedSequence, layer: usize) -> Result<TokenScores> {
    if layer >= model.config().num_layers {
        return Err(Error::LayerOutOfRange { layer, num_layers: model.config().num_layers });
    }
    let out = model.forward(std::slice::from_ref(seq))?;
    let agg = aggregate_layer(&out.attention[0], layer)?;
    token_scores(&agg, seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Top,
    Bottom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredRecord {
    pub record: LabeledRecord,
    pub kept: Vec<usize>,
    pub kept_tokens: usize,
    pub orig_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredDataset {
    pub dataset: LabeledDataset,
    pub records: Vec<FilteredRecord>,
    pub spec: FilterSpec,
}

/// One output line: the dataset fields plus the filtering statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredRow {
    pub text: String,
    pub label: usize,
    pub kept_tokens: usize,
    pub orig_tokens: usize,
    pub layer: usize,
    pub keep_fraction: f64,
}

impl FilteredDataset {
    pub fn rows(&self) -> Vec<FilteredRow> {
        self.records
            .iter()
            .map(|r| FilteredRow {
                text: r.record.text.clone(),
                label: r.record.label,
                kept_tokens: r.kept_tokens,
                orig_tokens: r.orig_tokens,
                layer: self.spec.layer,
                keep_fraction: self.spec.keep_fraction,
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::text::write_jsonl(path, &self.rows())
    }
}

/// Shortens every record (pairs as their joined text). Kept words are taken
/// verbatim from the source text, so unknown words survive filtering.
pub fn filter_dataset<T: Scalar>(
    model: &EncoderModel<T>,
    vocab: &Vocab,
    dataset: &LabeledDataset,
    spec: &FilterSpec,
    selection: Selection,
) -> Result<FilteredDataset> {
    spec.validate_for(model.config().num_layers)?;
    if vocab.len() > model.config().vocab_size {
        return Err(invalid(format!(
            "vocabulary has {} tokens but the model only {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let mut out = Vec::with_capacity(dataset.len());
    for rec in &dataset.records {
        let source = rec.joined_text();
        let seq = tokenize(&source, vocab, model.config().max_len, TokenizeMode::Classifier)?;
        let outcome = if seq.content_len() == 0 {
            filter_impl(&seq, &TokenScores { scores: vec![] }, spec, true)?
        } else {
            let scores = score_sequence(model, &seq, spec.layer)?;
            filter_impl(&seq, &scores, spec, selection == Selection::Top)?
        };
        out.push(FilteredRecord {
            record: LabeledRecord::new(outcome.seq.render(&source, vocab), rec.label),
            kept_tokens: outcome.kept.len(),
            orig_tokens: seq.content_len(),
            kept: outcome.kept,
        });
    }
    let dataset = LabeledDataset::new(out.iter().map(|r| r.record.clone()).collect(), dataset.num_classes)?;
    Ok(FilteredDataset { dataset, records: out, spec: *spec })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::NUM_RESERVED;

    fn seq(m: usize) -> TokenizedSequence {
        TokenizedSequence::classifier((0..m).map(|i| NUM_RESERVED + i).collect(), vec![None; m])
    }

    fn scores(v: &[f64]) -> TokenScores {
        TokenScores { scores: v.to_vec() }
    }

    #[test]
    fn keep_count_rounds_half_away_and_clamps() {
        assert_eq!(keep_count(0.5, 1, 5), 3);
        assert_eq!(keep_count(0.5, 1, 3), 2);
        assert_eq!(keep_count(0.06, 1, 4), 1);
        assert_eq!(keep_count(1.0 / 3.0, 1, 3), 1);
        assert_eq!(keep_count(1.0, 1, 7), 7);
        assert_eq!(keep_count(0.1, 1, 0), 0);
    }

    #[test]
    fn layer_aggregation_sums_heads() {
        let uniform = Matrix::filled(4, 4, 0.25f32);
        let attn = AttentionTensor { weights: vec![vec![uniform.clone(), uniform.clone()]], valid: vec![true; 4] };
        let agg = aggregate_layer(&attn, 0).unwrap();
        assert!(agg.as_slice().iter().all(|&v| v == 0.5));
        assert!(agg.row_sums().iter().all(|&s| s == 2.0));
        assert!(matches!(aggregate_layer(&attn, 1), Err(Error::LayerOutOfRange { .. })));

        let single = AttentionTensor { weights: vec![vec![uniform.clone()]], valid: vec![true; 4] };
        assert_eq!(aggregate_layer(&single, 0).unwrap(), uniform.cast::<f64>());
    }

    #[test]
    fn scores_are_column_sums_of_content_positions() {
        let s = seq(2);
        let uniform = Matrix::filled(4, 4, 0.25);
        assert_eq!(token_scores(&uniform, &s).unwrap().scores, vec![1.0, 1.0]);
        assert_eq!(token_scores(&Matrix::identity(4), &s).unwrap().scores, vec![1.0, 1.0]);
        // Column sums [1.2, 0.9, 1.5, 0.4].
        let m = Matrix::from_rows(&[
            vec![0.3, 0.2, 0.4, 0.1],
            vec![0.3, 0.3, 0.3, 0.1],
            vec![0.3, 0.2, 0.4, 0.1],
            vec![0.3, 0.2, 0.4, 0.1],
        ])
        .unwrap();
        let got = token_scores(&m, &s).unwrap().scores;
        assert!((got[0] - 0.9).abs() < 1e-12 && (got[1] - 1.5).abs() < 1e-12);
        assert!(matches!(token_scores(&Matrix::identity(3), &s), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn top_and_bottom_selection() {
        let s = seq(4);
        let sc = scores(&[0.9, 0.1, 0.5, 0.3]);
        let half = FilterSpec::new(0, 0.5).unwrap();
        let top = filter_sequence(&s, &sc, &half).unwrap();
        assert_eq!(top.kept, vec![0, 2]);
        assert_eq!(top.seq.ids, vec![crate::text::CLS, NUM_RESERVED, NUM_RESERVED + 2, crate::text::SEP]);
        assert_eq!(bottom_filter_sequence(&s, &sc, &half).unwrap().kept, vec![1, 3]);
        let flat = scores(&[0.7; 4]);
        assert_eq!(bottom_filter_sequence(&s, &flat, &half).unwrap().kept, vec![0, 1]);
    }

    #[test]
    fn full_fraction_is_identity() {
        let s = seq(5);
        let sc = scores(&[0.3, 0.1, 0.9, 0.0, 0.2]);
        let all = FilterSpec::new(0, 1.0).unwrap();
        assert_eq!(filter_sequence(&s, &sc, &all).unwrap().seq, s);
        assert_eq!(bottom_filter_sequence(&s, &sc, &all).unwrap().seq, s);
    }

    #[test]
    fn ties_go_to_the_earliest_position() {
        let s = seq(3);
        let spec = FilterSpec::new(0, 1.0 / 3.0).unwrap();
        assert_eq!(filter_sequence(&s, &scores(&[0.5, 0.5, 0.2]), &spec).unwrap().kept, vec![0]);
    }

    #[test]
    fn empty_content_is_flagged() {
        let s = seq(0);
        let out = filter_sequence(&s, &scores(&[]), &FilterSpec::new(0, 0.5).unwrap()).unwrap();
        assert!(out.empty_content);
        assert_eq!(out.seq, s);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(FilterSpec::new(0, 0.0).is_err());
        assert!(FilterSpec::new(0, 1.5).is_err());
        assert!(FilterSpec::new(0, f64::NAN).is_err());
        assert!(matches!(FilterSpec::new(3, 0.5).unwrap().validate_for(2), Err(Error::LayerOutOfRange { .. })));
        let s = seq(3);
        assert!(matches!(
            filter_sequence(&s, &scores(&[1.0, 2.0]), &FilterSpec::new(0, 0.5).unwrap()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
