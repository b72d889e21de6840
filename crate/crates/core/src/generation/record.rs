use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filter::{filter_sequence, FilterSpec, TokenScores};
use crate::text::{
    build_vocab, tokenize, TokenizeMode, TokenizedSequence, Vocab, BOS, EOS, FIELD_SEP, RESERVED_TOKENS,
};

/// Vocabulary entry for class `k`.
pub fn label_token(k: usize) -> String {
    format!("<label_{k}>")
}

/// One conditional-generation example. `top_tokens` is already shuffled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenRecord {
    pub label: Option<usize>,
    pub top_tokens: Vec<String>,
    pub target: String,
}

impl GenRecord {
    /// `[BOS] <label_k> [FSEP] tokens… [FSEP] target [EOS]`; the label slot is
    /// empty when there is no label.
    pub fn serialize(&self) -> String {
        let mut out = self.prompt_text();
        if !self.target.is_empty() {
            out.push(' ');
            out.push_str(&self.target);
        }
        out.push(' ');
        out.push_str(RESERVED_TOKENS[EOS]);
        out
    }

    /// Everything up to and including the second field separator.
    pub fn prompt_text(&self) -> String {
        let mut parts = vec![RESERVED_TOKENS[BOS].to_string()];
        if let Some(k) = self.label {
            parts.push(label_token(k));
        }
        parts.push(RESERVED_TOKENS[FIELD_SEP].into());
        parts.extend(self.top_tokens.iter().cloned());
        parts.push(RESERVED_TOKENS[FIELD_SEP].into());
        parts.join(" ")
    }

    /// Inverse of [`GenRecord::serialize`].
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |m: &str| invalid(format!("malformed generation record: {m}"));
        let toks: Vec<&str> = s.split_whitespace().collect();
        let (bos, eos, fsep) = (RESERVED_TOKENS[BOS], RESERVED_TOKENS[EOS], RESERVED_TOKENS[FIELD_SEP]);
        if toks.first() != Some(&bos) || toks.last() != Some(&eos) || toks.len() < 4 {
            return Err(bad("missing [BOS]/[EOS]"));
        }
        let body = &toks[1..toks.len() - 1];
        let first = body.iter().position(|&t| t == fsep).ok_or_else(|| bad("missing field separator"))?;
        let label = match &body[..first] {
            [] => None,
            [t] => Some(parse_label_token(t).ok_or_else(|| bad("bad label token"))?),
            _ => return Err(bad("more than one label token")),
        };
        let rest = &body[first + 1..];
        let second = rest.iter().position(|&t| t == fsep).ok_or_else(|| bad("missing second field separator"))?;
        Ok(Self {
            label,
            top_tokens: rest[..second].iter().map(|t| t.to_string()).collect(),
            target: rest[second + 1..].join(" "),
        })
    }

    fn prompt_ids(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        if let Some(k) = self.label {
            ids.push(vocab.id(&label_token(k)).ok_or_else(|| invalid(format!("vocabulary lacks {}", label_token(k))))?);
        }
        ids.push(FIELD_SEP);
        for t in &self.top_tokens {
            ids.extend(lm_ids(t, vocab));
        }
        ids.push(FIELD_SEP);
        Ok(ids)
    }

    /// Ids of the prompt part, as fed to the sampler.
    pub fn encode_prompt(&self, vocab: &Vocab) -> Result<Vec<usize>> {
        self.prompt_ids(vocab)
    }

    /// Ids of the whole training string, truncated to `max_len` (the final
    /// EOS is kept only if it fits).
    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
        let mut ids = self.prompt_ids(vocab)?;
        ids.extend(lm_ids(&self.target, vocab));
        ids.push(EOS);
        ids.truncate(max_len);
        Ok(ids)
    }
}

fn lm_ids(text: &str, vocab: &Vocab) -> Vec<usize> {
    tokenize(text, vocab, usize::MAX, TokenizeMode::Lm).map(|s| s.ids).unwrap_or_default()
}

pub fn parse_label_token(t: &str) -> Option<usize> {
    t.strip_prefix("<label_")?.strip_suffix('>')?.parse().ok()
}

/// Takes the top-scoring content words (same selection as
/// [`filter_sequence`]), drops markers, and shuffles them with `seed`.
/// Words come from `source` where the sequence has provenance.
#[allow(clippy::too_many_arguments)]
pub fn build_gen_record(
    label: Option<usize>,
    seq: &TokenizedSequence,
    source: &str,
    vocab: &Vocab,
    scores: &TokenScores,
    keep_fraction: f64,
    target: &str,
    seed: u64,
) -> Result<GenRecord> {
    let spec = FilterSpec::new(0, keep_fraction)?;
    let out = filter_sequence(seq, scores, &spec)?;
    let mut top_tokens: Vec<String> = out
        .seq
        .content
        .clone()
        .map(|i| match &out.seq.offsets[i] {
            Some(r) => source.get(r.clone()).map(str::to_string).ok_or_else(|| invalid("offset outside source")),
            None => vocab.token(out.seq.ids[i]).map(str::to_string).ok_or(Error::UnknownId(out.seq.ids[i])),
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    top_tokens.shuffle(&mut rng);
    Ok(GenRecord { label, top_tokens, target: target.to_string() })
}

/// Word vocabulary over top tokens and targets, plus one token per class.
pub fn build_lm_vocab(records: &[GenRecord], max_size: usize, num_classes: usize) -> Result<Vocab> {
    let corpus: Vec<String> = records.iter().map(|r| format!("{} {}", r.top_tokens.join(" "), r.target)).collect();
    let mut vocab = build_vocab(&corpus, max_size)?;
    for k in 0..num_classes {
        vocab.push(&label_token(k));
    }
    Ok(vocab)
}
