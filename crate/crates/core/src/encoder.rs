//! Transformer encoder with a classification head on the CLS position.
//!
//! Every forward pass can return the full per-layer, per-head attention
//! probabilities, which is what the filtering code consumes.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, AttnMask, Graph};
use crate::error::{invalid, Error, Result};
use crate::tensor::{Matrix, Scalar};
use crate::text::{TokenizedSequence, PAD};
use crate::transformer::{
    backbone_forward, backbone_specs, bias_spec, check_layout, head_spec, init_params, BackboneDims, BackboneIndex,
    Dropout, ParamSet, ParamSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 64,
            ff_dim: 256,
            vocab_size: 1024,
            max_len: 128,
            num_classes: 2,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub(crate) fn dims(&self) -> BackboneDims {
        BackboneDims {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            ff_dim: self.ff_dim,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    pub(crate) fn specs(&self) -> (Vec<ParamSpec>, BackboneIndex, usize, usize) {
        let (mut specs, index) = backbone_specs(&self.dims());
        specs.push(head_spec("head.weight", self.model_dim, self.num_classes, 0.02));
        let head_w = specs.len() - 1;
        specs.push(bias_spec("head.bias", self.num_classes));
        let head_b = specs.len() - 1;
        (specs, index, head_w, head_b)
    }
}

/// `weights[layer][head]` is an `n × n` row-stochastic matrix over the
/// padded sequence; columns of invalid (padding) keys are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor<T = f32> {
    pub weights: Vec<Vec<Matrix<T>>>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> AttentionTensor<T> {
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_heads(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn seq_len(&self) -> usize {
        self.valid.len()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderOutput<T> {
    /// `batch × num_classes`.
    pub logits: Matrix<T>,
    pub attention: Vec<AttentionTensor<T>>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel<T = f32> {
    config: EncoderConfig,
    params: ParamSet<T>,
    index: BackboneIndex,
    head_w: usize,
    head_b: usize,
}

impl<T: Scalar> EncoderModel<T> {
    /// Freshly initialized model; the config's seed fixes every parameter.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let (specs, index, head_w, head_b) = config.specs();
        let params = init_params(&specs, config.seed);
        Ok(Self { config, params, index, head_w, head_b })
    }

    pub fn from_params(config: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (specs, index, head_w, head_b) = config.specs();
        check_layout(&specs, &params).map_err(Error::ShapeMismatch)?;
        Ok(Self { config, params, index, head_w, head_b })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params.tensors
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            params: self.params.cast(),
            index: self.index.clone(),
            head_w: self.head_w,
            head_b: self.head_b,
        }
    }

    #[cfg(test)]
    pub(crate) fn token_embedding_index(&self) -> usize {
        self.index.tok_emb
    }

    #[cfg(test)]
    pub(crate) fn head_indices(&self) -> (usize, usize) {
        (self.head_w, self.head_b)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::SequenceTooLong { len: ids.len(), max_len: self.config.max_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::IdOutOfRange { id, vocab_size: self.config.vocab_size });
        }
        Ok(())
    }

    /// Records the classifier graph for one (possibly padded) sequence and
    /// returns the graph with the `1 × C` logits node and attention nodes.
    fn build<'a>(
        &'a self,
        ids: &[usize],
        mask: &AttnMask,
        dropout: Option<Dropout<'_>>,
    ) -> (Graph<'a, T>, autograd::NodeId, Vec<Vec<autograd::NodeId>>) {
        let mut g = Graph::new(&self.params.tensors);
        let out = backbone_forward(&mut g, &self.index, &self.config.dims(), ids, mask, dropout);
        let cls = g.select_rows(out.hidden, &[0]);
        let w = g.param(self.head_w);
        let b = g.param(self.head_b);
        let logits = g.matmul(cls, w);
        let logits = g.add_row(logits, b);
        (g, logits, out.attention)
    }

    /// Pads the batch with PAD to its longest member and runs every item.
    pub fn forward(&self, batch: &[TokenizedSequence]) -> Result<EncoderOutput<T>> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("batch"));
        }
        for seq in batch {
            self.check_ids(&seq.ids)?;
        }
        let n = batch.iter().map(TokenizedSequence::len).max().unwrap_or(0);
        let mut logits = Matrix::zeros(batch.len(), self.config.num_classes);
        let mut attention = Vec::with_capacity(batch.len());
        for (b, seq) in batch.iter().enumerate() {
            let mut ids = seq.ids.clone();
            ids.resize(n, PAD);
            let valid: Vec<bool> = (0..n).map(|i| i < seq.len()).collect();
            let mask = AttnMask { key_valid: valid.clone(), causal: false };
            let (g, out, attn_nodes) = self.build(&ids, &mask, None);
            logits.row_mut(b).copy_from_slice(g.value(out).row(0));
            let weights = attn_nodes
                .iter()
                .map(|layer| layer.iter().map(|&a| g.value(a).clone()).collect())
                .collect();
            attention.push(AttentionTensor { weights, valid });
        }
        Ok(EncoderOutput { logits, attention })
    }

    /// Logits for a single unpadded sequence, without attention capture.
    pub fn logits(&self, seq: &TokenizedSequence) -> Result<Vec<T>> {
        self.check_ids(&seq.ids)?;
        let mask = AttnMask::all(seq.len(), false);
        let (g, out, _) = self.build(&seq.ids, &mask, None);
        Ok(g.value(out).row(0).to_vec())
    }

    pub fn predict(&self, seq: &TokenizedSequence) -> Result<usize> {
        let logits = self.logits(seq)?;
        Ok(argmax(&logits))
    }

    /// Final-layer contextual vectors, one row per position.
    pub fn token_vectors(&self, seq: &TokenizedSequence) -> Result<Matrix<T>> {
        self.check_ids(&seq.ids)?;
        let mask = AttnMask::all(seq.len(), false);
        let mut g = Graph::new(&self.params.tensors);
        let out = backbone_forward(&mut g, &self.index, &self.config.dims(), &seq.ids, &mask, None);
        Ok(g.value(out.hidden).clone())
    }

    /// Cross-entropy of `label` at the CLS logits; gradients are added into
    /// `grads`. Returns `(loss, predicted class)`.
    pub fn loss_and_grad(
        &self,
        seq: &TokenizedSequence,
        label: usize,
        grads: &mut [Matrix<T>],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(T, usize)> {
        self.check_ids(&seq.ids)?;
        if label >= self.config.num_classes {
            return Err(invalid(format!("label {label} >= num_classes {}", self.config.num_classes)));
        }
        let mask = AttnMask::all(seq.len(), false);
        let dropout = dropout_rng.map(|rng| Dropout { rate: self.config.dropout, rng });
        let (mut g, logits, _) = self.build(&seq.ids, &mask, dropout);
        let pred = argmax(g.value(logits).row(0));
        let loss = g.cross_entropy(logits, &[Some(label)]);
        let value = g.value(loss)[(0, 0)];
        g.backward(loss, grads);
        Ok((value, pred))
    }

    pub fn loss(&self, seq: &TokenizedSequence, label: usize) -> Result<T> {
        self.check_ids(&seq.ids)?;
        let mask = AttnMask::all(seq.len(), false);
        let (mut g, logits, _) = self.build(&seq.ids, &mask, None);
        let loss = g.cross_entropy(logits, &[Some(label)]);
        Ok(g.value(loss)[(0, 0)])
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Scaled dot-product attention for one head:
/// `attn = softmax(QKᵀ/√d)` with masked keys excluded, `output = attn · V`.
pub fn attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, mask: &[bool]) -> Result<(Matrix<T>, Matrix<T>)> {
    let n = q.rows();
    if k.shape() != q.shape() || v.rows() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?}, mask {}",
            q.shape(),
            k.shape(),
            v.shape(),
            mask.len()
        )));
    }
    if !(q.is_finite() && k.is_finite() && v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    attention_by(q, k, v, |_, j| mask[j])
}

/// Attention with a per-`(query, key)` admissibility predicate. Every query
/// row must admit at least one key.
pub fn attention_by<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    allows: impl Fn(usize, usize) -> bool,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if k.shape() != q.shape() || v.rows() != k.rows() {
        return Err(Error::ShapeMismatch(format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape())));
    }
    if !(q.is_finite() && k.is_finite() && v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    if (0..q.rows()).any(|i| !(0..k.rows()).any(|j| allows(i, j))) {
        return Err(invalid("attention needs at least one unmasked position per row"));
    }
    let d = T::of(q.cols() as f64);
    let scores = q.matmul_t(k).scale(T::one() / d.sqrt());
    let attn = autograd::masked_softmax_by(&scores, allows);
    let out = attn.matmul(v);
    Ok((out, attn))
}
