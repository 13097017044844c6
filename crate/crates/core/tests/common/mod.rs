#![allow(dead_code)]

use dialport_core::data::{toy, Corpus, Split, TextCorpus, Tokenizer};
use dialport_core::model::{ModelConfig, TransformerModel};

pub fn tokenizer(corpus: &Corpus) -> Tokenizer {
    let lines = toy::text_lines(200, 9);
    Tokenizer::train(corpus.texts().chain(lines.iter().map(String::as_str)), 330).unwrap()
}

pub fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        n_layers: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        max_seq_len: 256,
        n_segments: 3,
        dropout: 0.0,
        seed: 5,
    }
}

pub fn tiny_model(tok: &Tokenizer) -> TransformerModel {
    TransformerModel::new(tiny_config(tok.vocab_size())).unwrap()
}

pub fn corpora(lang: &str, n: usize) -> (Corpus, Corpus) {
    (
        toy::persona_corpus(lang, Split::Train, n, 11),
        toy::persona_corpus(lang, Split::Validation, 3, 12),
    )
}

pub fn text(lang: &str, n: usize, seed: u64) -> TextCorpus {
    TextCorpus::new(lang, toy::text_lines(n, seed))
}
