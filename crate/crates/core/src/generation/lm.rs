use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Graph, NodeId};
use crate::encoder::argmax;
use crate::error::{invalid, Error, Result};
use crate::optim::TrainConfig;
use crate::tensor::{Matrix, Scalar};
use crate::train::{run_epochs, EpochStats, HasParams, ItemStats};
use crate::transformer::{
    backbone_forward, backbone_specs, bias_spec, check_layout, init_params, BackboneDims, BackboneIndex, Dropout,
    ParamSet, ParamSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { num_layers: 4, num_heads: 4, model_dim: 64, ff_dim: 256, vocab_size: 1024, max_len: 128, dropout: 0.0, seed: 0 }
    }
}

impl LmConfig {
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
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    fn specs(&self) -> (Vec<ParamSpec>, BackboneIndex, usize) {
        let (mut specs, index) = backbone_specs(&self.dims());
        specs.push(bias_spec("lm_head.bias", self.vocab_size));
        let bias = specs.len() - 1;
        (specs, index, bias)
    }
}

/// Causal transformer whose output projection is the transposed token
/// embedding matrix.
#[derive(Debug, Clone)]
pub struct LmModel<T = f32> {
    config: LmConfig,
    params: ParamSet<T>,
    index: BackboneIndex,
    head_b: usize,
}

impl<T: Scalar> HasParams<T> for LmModel<T> {
    fn tensors(&self) -> &[Matrix<T>] {
        &self.params.tensors
    }
    fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params.tensors
    }
}

impl<T: Scalar> LmModel<T> {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let (specs, index, head_b) = config.specs();
        let params = init_params(&specs, config.seed);
        Ok(Self { config, params, index, head_b })
    }

    pub fn from_params(config: LmConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let (specs, index, head_b) = config.specs();
        check_layout(&specs, &params).map_err(Error::ShapeMismatch)?;
        Ok(Self { config, params, index, head_b })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.params.tensors
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

    fn build<'a>(&'a self, ids: &[usize], rows: Option<&[usize]>, dropout: Option<Dropout<'_>>) -> (Graph<'a, T>, NodeId) {
        let mut g = Graph::new(&self.params.tensors);
        let mask = AttnMask::all(ids.len(), true);
        let out = backbone_forward(&mut g, &self.index, &self.config.dims(), ids, &mask, dropout);
        let hidden = match rows {
            Some(r) => g.select_rows(out.hidden, r),
            None => out.hidden,
        };
        let emb = g.param(self.index.tok_emb);
        let bias = g.param(self.head_b);
        let logits = g.matmul_t(hidden, emb);
        let logits = g.add_row(logits, bias);
        (g, logits)
    }

    /// `n × vocab` next-token logits; row `i` sees positions `0..=i` only.
    pub fn logits(&self, ids: &[usize]) -> Result<Matrix<T>> {
        self.check_ids(ids)?;
        let (g, logits) = self.build(ids, None, None);
        Ok(g.value(logits).clone())
    }

    /// Logits for the token following `ids`.
    pub fn next_logits(&self, ids: &[usize]) -> Result<Vec<T>> {
        self.check_ids(ids)?;
        let (g, logits) = self.build(ids, Some(&[ids.len() - 1]), None);
        Ok(g.value(logits).row(0).to_vec())
    }

    /// Mean next-token cross-entropy over the sequence; gradients are added
    /// into `grads`. Also returns `(correct, predicted)` next-token counts.
    pub fn loss_and_grad(
        &self,
        ids: &[usize],
        grads: &mut [Matrix<T>],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(T, usize, usize)> {
        self.check_ids(ids)?;
        if ids.len() < 2 {
            return Err(invalid("a language-model example needs at least two tokens"));
        }
        let dropout = dropout_rng.map(|rng| Dropout { rate: self.config.dropout, rng });
        let (mut g, logits) = self.build(ids, None, dropout);
        let targets: Vec<Option<usize>> = (0..ids.len()).map(|i| ids.get(i + 1).copied()).collect();
        let lv = g.value(logits);
        let correct = (0..ids.len() - 1).filter(|&i| argmax(lv.row(i)) == ids[i + 1]).count();
        let loss = g.cross_entropy(logits, &targets);
        let value = g.value(loss)[(0, 0)];
        g.backward(loss, grads);
        Ok((value, correct, ids.len() - 1))
    }

    pub fn loss(&self, ids: &[usize]) -> Result<T> {
        let mut grads = self.params.zeros_like();
        Ok(self.loss_and_grad(ids, &mut grads, None)?.0)
    }

    /// Replaces the token at each probed position and checks that logits at
    /// earlier positions are bit-identical.
    pub fn causality_probe(&self, ids: &[usize]) -> Result<()> {
        let base = self.logits(ids)?;
        let n = ids.len();
        let mut probes = vec![n - 1, n / 2];
        probes.dedup();
        for j in probes {
            if j == 0 {
                continue;
            }
            let mut changed = ids.to_vec();
            changed[j] = (ids[j] + 1) % self.config.vocab_size;
            let other = self.logits(&changed)?;
            if base.as_slice()[..j * base.cols()] != other.as_slice()[..j * other.cols()] {
                return Err(Error::CausalityViolation(j));
            }
        }
        Ok(())
    }
}

/// Next-token training on pre-encoded sequences.
pub fn train_lm(mut model: LmModel<f32>, corpus: &[Vec<usize>], cfg: &TrainConfig) -> Result<(LmModel<f32>, Vec<EpochStats>)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(probe) = corpus.iter().find(|s| s.len() >= 2) {
        model.causality_probe(probe)?;
    }
    let use_dropout = model.config.dropout > 0.0;
    let history = run_epochs(&mut model, corpus.len(), cfg, |m, i, grads, rng| {
        let (loss, correct, count) = m.loss_and_grad(&corpus[i], grads, use_dropout.then_some(rng))?;
        Ok(ItemStats { loss, correct, count })
    })?;
    if let Some(probe) = corpus.iter().find(|s| s.len() >= 2) {
        model.causality_probe(probe)?;
    }
    Ok((model, history))
}
