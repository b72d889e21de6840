use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lm::LmModel;
use super::record::parse_label_token;
use crate::error::{invalid, Error, Result};
use crate::tensor::Scalar;
use crate::text::{detokenize, Vocab, EOS, NUM_RESERVED, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub repetition_penalty: f64,
    /// Generated tokens before EOS is allowed.
    pub min_len: usize,
    /// Upper bound on generated tokens.
    pub max_len: usize,
    pub seed: u64,
    pub early_stop: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.9,
            top_k: 30,
            top_p: 0.7,
            repetition_penalty: 3.0,
            min_len: 100,
            max_len: 520,
            seed: 0,
            early_stop: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature must be > 0"));
        }
        if self.top_k == 0 {
            return Err(invalid("top_k must be >= 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid("top_p must be in (0, 1]"));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(invalid("repetition_penalty must be >= 1"));
        }
        if self.min_len > self.max_len {
            return Err(invalid("min_len must not exceed max_len"));
        }
        Ok(())
    }
}

/// The constrained distribution plus the sets it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Constrained {
    /// Over the full vocabulary; zero outside `support`.
    pub probs: Vec<f64>,
    /// Top-k candidates after penalty and temperature, best first.
    pub top_k: Vec<usize>,
    /// Nucleus: a prefix of `top_k`.
    pub support: Vec<usize>,
}

/// Repetition penalty, temperature, top-k, top-p, then renormalization.
pub fn constrain_logits(logits: &[f64], history: &[usize], cfg: &SamplerConfig) -> Result<Vec<f64>> {
    Ok(constrain_logits_traced(logits, history, cfg, |_| true)?.probs)
}

/// As [`constrain_logits`], with tokens failing `allowed` removed before
/// top-k.
pub fn constrain_logits_traced(
    logits: &[f64],
    history: &[usize],
    cfg: &SamplerConfig,
    allowed: impl Fn(usize) -> bool,
) -> Result<Constrained> {
    cfg.validate()?;
    if logits.is_empty() {
        return Err(Error::EmptyInput("logits"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let mut z = logits.to_vec();
    let seen: BTreeSet<usize> = history.iter().copied().filter(|&t| t < z.len()).collect();
    for t in seen {
        z[t] = if z[t] > 0.0 { z[t] / cfg.repetition_penalty } else { z[t] * cfg.repetition_penalty };
    }
    z.iter_mut().for_each(|v| *v /= cfg.temperature);

    let mut order: Vec<usize> = (0..z.len()).filter(|&i| allowed(i)).collect();
    if order.is_empty() {
        return Err(invalid("every token is disallowed"));
    }
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);

    let max = z[order[0]];
    let weights: Vec<f64> = order.iter().map(|&i| (z[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut cumulative = 0.0;
    let mut cut = order.len();
    for (n, w) in weights.iter().enumerate() {
        cumulative += w / total;
        if cumulative >= cfg.top_p {
            cut = n + 1;
            break;
        }
    }
    let support = order[..cut].to_vec();
    let mass: f64 = weights[..cut].iter().sum();
    let mut probs = vec![0.0; z.len()];
    for (&i, w) in support.iter().zip(&weights) {
        probs[i] = w / mass;
    }
    debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    Ok(Constrained { probs, top_k: order, support })
}

/// Inverse-CDF draw over `support` (in the given order).
pub fn draw(probs: &[f64], support: &[usize], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &i in support {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    *support.last().expect("non-empty support")
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub token: usize,
    pub top_k: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids, without the prompt and without the closing EOS.
    pub ids: Vec<usize>,
    pub text: String,
    pub stopped_at_eos: bool,
    pub steps: Vec<StepTrace>,
}

/// Ids the sampler may emit: ordinary words, plus EOS once `min_len` tokens
/// are out (and only when early stopping is on). Label tokens belong to the
/// prompt and are never emitted.
fn emittable(id: usize, generated: usize, cfg: &SamplerConfig, labels: &BTreeSet<usize>) -> bool {
    if id == EOS {
        cfg.early_stop && generated >= cfg.min_len
    } else {
        id >= NUM_RESERVED && id != UNK && !labels.contains(&id)
    }
}

/// Autoregressive continuation of `prompt`. Stops at EOS (after `min_len`),
/// at `max_len` generated tokens, or when the model's context is full. The
/// repetition-penalty history is the prompt plus everything generated.
pub fn sample<T: Scalar>(model: &LmModel<T>, vocab: &Vocab, prompt: &[usize], cfg: &SamplerConfig) -> Result<Generation> {
    cfg.validate()?;
    let context = model.config().max_len;
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    if prompt.len() >= context {
        return Err(Error::PromptTooLong { len: prompt.len(), max_len: context });
    }
    let labels: BTreeSet<usize> =
        (0..vocab.len()).filter(|&i| vocab.token(i).and_then(parse_label_token).is_some()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = prompt.to_vec();
    let mut steps = Vec::new();
    let mut stopped_at_eos = false;
    while steps.len() < cfg.max_len && ids.len() < context {
        let logits: Vec<f64> = model.next_logits(&ids)?.into_iter().map(Scalar::as_f64).collect();
        let generated = steps.len();
        let c = constrain_logits_traced(&logits, &ids, cfg, |i| emittable(i, generated, cfg, &labels))?;
        let token = draw(&c.probs, &c.support, &mut rng);
        steps.push(StepTrace { token, top_k: c.top_k });
        if token == EOS {
            stopped_at_eos = true;
            break;
        }
        ids.push(token);
    }
    let generated = ids[prompt.len()..].to_vec();
    Ok(Generation { text: detokenize(&generated, vocab)?, ids: generated, stopped_at_eos, steps })
}
