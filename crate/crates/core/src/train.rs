//! Mini-batch training loops for the classifier (and, through
//! [`run_epochs`], the language model).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{invalid, Error, Result};
use crate::optim::{AdamW, TrainConfig};
use crate::tensor::{Matrix, Scalar};
use crate::text::TokenizedSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-item loss over the epoch.
    pub loss: f64,
    /// Running accuracy over the epoch (predictions taken before each update).
    pub accuracy: f64,
}

pub(crate) struct ItemStats<T> {
    pub loss: T,
    pub correct: usize,
    pub count: usize,
}

pub(crate) trait HasParams<T> {
    fn tensors(&self) -> &[Matrix<T>];
    fn tensors_mut(&mut self) -> &mut [Matrix<T>];
}

impl<T: Scalar> HasParams<T> for EncoderModel<T> {
    fn tensors(&self) -> &[Matrix<T>] {
        &self.params().tensors
    }
    fn tensors_mut(&mut self) -> &mut [Matrix<T>] {
        self.params_mut()
    }
}

/// Shuffled mini-batch AdamW over `num_items` items. `item` adds one item's
/// gradient into the buffer and reports its loss.
pub(crate) fn run_epochs<T, M, F>(model: &mut M, num_items: usize, cfg: &TrainConfig, mut item: F) -> Result<Vec<EpochStats>>
where
    T: Scalar,
    M: HasParams<T>,
    F: FnMut(&M, usize, &mut [Matrix<T>], &mut ChaCha8Rng) -> Result<ItemStats<T>>,
{
    if num_items == 0 {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch_size must be >= 1"));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d509);
    let mut order: Vec<usize> = (0..num_items).collect();
    let mut opt = AdamW::new(model.tensors(), cfg);
    let mut grads: Vec<Matrix<T>> = model.tensors().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut count = 0usize;
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| g.fill(T::zero()));
            let mut batch_loss = 0.0;
            for &i in batch {
                let stats = item(model, i, &mut grads, &mut dropout_rng)?;
                batch_loss += stats.loss.as_f64();
                correct += stats.correct;
                count += stats.count;
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: batch_index, loss: batch_loss });
            }
            loss_sum += batch_loss;
            let inv = T::of(1.0 / batch.len() as f64);
            for g in grads.iter_mut() {
                g.as_mut_slice().iter_mut().for_each(|v| *v = *v * inv);
            }
            opt.step(model.tensors_mut(), &grads, cfg.lr_at(step));
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / num_items as f64,
            accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
        };
        log::info!("epoch {epoch}: loss {:.4} acc {:.4}", stats.loss, stats.accuracy);
        history.push(stats);
    }
    Ok(history)
}

/// Fine-tunes `model` on `(seqs[i], labels[i])` with CLS cross-entropy.
pub fn train_classifier(
    mut model: EncoderModel<f32>,
    seqs: &[TokenizedSequence],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(EncoderModel<f32>, Vec<EpochStats>)> {
    if seqs.len() != labels.len() {
        return Err(invalid("one label per sequence"));
    }
    if seqs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let use_dropout = model.config().dropout > 0.0;
    let history = run_epochs(&mut model, seqs.len(), cfg, |m, i, grads, rng| {
        let (loss, pred) = m.loss_and_grad(&seqs[i], labels[i], grads, use_dropout.then_some(rng))?;
        Ok(ItemStats { loss, correct: usize::from(pred == labels[i]), count: 1 })
    })?;
    Ok((model, history))
}

pub fn predict_all<T: Scalar>(model: &EncoderModel<T>, seqs: &[TokenizedSequence]) -> Result<Vec<usize>> {
    seqs.iter().map(|s| model.predict(s)).collect()
}

pub fn accuracy<T: Scalar>(model: &EncoderModel<T>, seqs: &[TokenizedSequence], labels: &[usize]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if seqs.len() != labels.len() {
        return Err(invalid("one label per sequence"));
    }
    let preds = predict_all(model, seqs)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / seqs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::text::{build_vocab, tokenize, TokenizeMode};

    fn toy() -> (EncoderModel<f32>, Vec<TokenizedSequence>, Vec<usize>) {
        let texts = ["x y good", "y x good", "bad x y", "x bad y", "good y", "y bad"];
        let labels = vec![1, 1, 0, 0, 1, 0];
        let vocab = build_vocab(&texts, 32).unwrap();
        let seqs = texts
            .iter()
            .map(|t| tokenize(t, &vocab, 8, TokenizeMode::Classifier).unwrap())
            .collect();
        let cfg = EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            vocab_size: vocab.len(),
            max_len: 8,
            num_classes: 2,
            dropout: 0.0,
            seed: 3,
        };
        (EncoderModel::new(cfg).unwrap(), seqs, labels)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let (model, seqs, labels) = toy();
        let before = model.params().clone();
        let cfg = TrainConfig { epochs: 1, batch_size: 2, learning_rate: 0.0, ..TrainConfig::default() };
        let (after, history) = train_classifier(model, &seqs, &labels, &cfg).unwrap();
        assert_eq!(history.len(), 1);
        for (a, b) in before.tensors.iter().zip(&after.params().tensors) {
            let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn loss_decreases_on_a_separable_toy_task() {
        let (model, seqs, labels) = toy();
        let cfg = TrainConfig { epochs: 30, batch_size: 2, learning_rate: 3e-3, ..TrainConfig::default() };
        let (model, history) = train_classifier(model, &seqs, &labels, &cfg).unwrap();
        assert!(history.last().unwrap().loss < history[0].loss);
        assert_eq!(accuracy(&model, &seqs, &labels).unwrap(), 1.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (model, _, _) = toy();
        assert!(matches!(train_classifier(model, &[], &[], &TrainConfig::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 1e-3, ..TrainConfig::default() };
        let (m1, seqs, labels) = toy();
        let (m2, _, _) = toy();
        let (a, ha) = train_classifier(m1, &seqs, &labels, &cfg).unwrap();
        let (b, hb) = train_classifier(m2, &seqs, &labels, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn dropout_training_runs_and_is_seeded() {
        let (model, seqs, labels) = toy();
        let mut cfg_model = model.config().clone();
        cfg_model.dropout = 0.1;
        let model = EncoderModel::<f32>::new(cfg_model).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 3, learning_rate: 1e-3, ..TrainConfig::default() };
        let (a, _) = train_classifier(model.clone(), &seqs, &labels, &cfg).unwrap();
        let (b, _) = train_classifier(model, &seqs, &labels, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
    }
}
