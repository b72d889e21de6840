#![allow(dead_code)]

use attnshort::text::{build_vocab, NUM_RESERVED};
use attnshort::{EncoderConfig, EncoderModel, TokenizedSequence, Vocab};

pub fn tiny_config(vocab_size: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 4,
        model_dim: 16,
        ff_dim: 32,
        vocab_size,
        max_len: 70,
        num_classes: 2,
        dropout: 0.0,
        seed,
    }
}

pub fn letters_vocab() -> Vocab {
    build_vocab(&["a b c d e f g h i j k l m n o p"], 64).unwrap()
}

pub fn tiny_model(seed: u64) -> (EncoderModel<f32>, Vocab) {
    let vocab = letters_vocab();
    (EncoderModel::new(tiny_config(vocab.len(), seed)).unwrap(), vocab)
}

/// Content-only sequence over ids that are all ordinary words.
pub fn content_seq(m: usize) -> TokenizedSequence {
    TokenizedSequence::classifier((0..m).map(|i| NUM_RESERVED + i % 16).collect(), vec![None; m])
}
