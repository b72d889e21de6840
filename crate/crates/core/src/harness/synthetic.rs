use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::text::{LabeledDataset, LabeledRecord, NUM_RESERVED};

/// Planted-keyword corpus parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_records: usize,
    /// Including the reserved tokens.
    pub vocab_size: usize,
    pub num_classes: usize,
    pub keywords_per_class: usize,
    pub noise_len: usize,
    pub seed: u64,
    /// When set, a `.` closes every run of this many words.
    pub sentence_len: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_records: 2000,
            vocab_size: 200,
            num_classes: 2,
            keywords_per_class: 2,
            noise_len: 20,
            seed: 0,
            sentence_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: LabeledDataset,
    /// Per record, the content-token indices holding planted keywords.
    pub keyword_positions: Vec<Vec<usize>>,
    /// `keywords[c]` are the class-`c` keywords.
    pub keywords: Vec<Vec<String>>,
    pub noise_words: Vec<String>,
}

pub fn keyword(class: usize, i: usize) -> String {
    format!("kw{class}x{i}")
}

pub fn noise_word(i: usize) -> String {
    format!("w{i}")
}

/// Record `i` has label `i mod num_classes`, `noise_len` uniformly drawn
/// noise words, and every keyword of its class at random positions.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let SyntheticSpec { num_records, vocab_size, num_classes, keywords_per_class, noise_len, seed, sentence_len } =
        spec.clone();
    if num_records == 0 || keywords_per_class == 0 || noise_len == 0 || sentence_len == Some(0) {
        return Err(invalid("synthetic parameters must be >= 1"));
    }
    if num_classes < 2 {
        return Err(invalid("num_classes must be >= 2"));
    }
    let num_keywords = num_classes * keywords_per_class;
    let words_total = vocab_size.saturating_sub(NUM_RESERVED + usize::from(sentence_len.is_some()));
    if words_total <= num_keywords {
        return Err(invalid(format!(
            "vocab_size {vocab_size} leaves no room for noise after {num_keywords} keywords"
        )));
    }
    let keywords: Vec<Vec<String>> =
        (0..num_classes).map(|c| (0..keywords_per_class).map(|i| keyword(c, i)).collect()).collect();
    let noise_words: Vec<String> = (0..words_total - num_keywords).map(noise_word).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = noise_len + keywords_per_class;
    let mut records = Vec::with_capacity(num_records);
    let mut keyword_positions = Vec::with_capacity(num_records);
    for i in 0..num_records {
        let label = i % num_classes;
        let mut slots = sample(&mut rng, m, keywords_per_class).into_vec();
        slots.sort_unstable();
        let mut kws = keywords[label].clone();
        kws.shuffle(&mut rng);
        let mut kw_iter = kws.into_iter();
        let mut words = Vec::with_capacity(m);
        for p in 0..m {
            if slots.binary_search(&p).is_ok() {
                words.push(kw_iter.next().expect("one keyword per slot"));
            } else {
                words.push(noise_words[rng.random_range(0..noise_words.len())].clone());
            }
        }
        let (text, positions) = match sentence_len {
            None => (words.join(" "), slots),
            Some(len) => punctuate(&words, len, &slots),
        };
        records.push(LabeledRecord::new(text, label));
        keyword_positions.push(positions);
    }
    Ok(SyntheticDataset { dataset: LabeledDataset::new(records, num_classes)?, keyword_positions, keywords, noise_words })
}

/// Inserts ` .` after every `len` words and remaps word slots to token indices.
fn punctuate(words: &[String], len: usize, slots: &[usize]) -> (String, Vec<usize>) {
    let mut tokens: Vec<&str> = Vec::with_capacity(words.len() + words.len() / len + 1);
    let mut index_of = Vec::with_capacity(words.len());
    for (i, w) in words.iter().enumerate() {
        index_of.push(tokens.len());
        tokens.push(w);
        if (i + 1) % len == 0 || i + 1 == words.len() {
            tokens.push(".");
        }
    }
    (tokens.join(" "), slots.iter().map(|&s| index_of[s]).collect())
}

/// Fraction of `keyword_positions` present in `kept`.
pub fn keyword_recall(kept: &[usize], keyword_positions: &[usize]) -> f64 {
    if keyword_positions.is_empty() {
        return 1.0;
    }
    let hits = keyword_positions.iter().filter(|p| kept.contains(p)).count();
    hits as f64 / keyword_positions.len() as f64
}

/// `k` distinct positions out of `m`, uniformly at random, ascending.
pub fn random_selection(m: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v = sample(rng, m, k.min(m)).into_vec();
    v.sort_unstable();
    v
}
