//! Corpora, tokenization, training-example layout and corpus translation.

mod corpus;
mod example;
mod tokenizer;
pub mod toy;
mod translate;

use thiserror::Error;

pub use corpus::{Corpus, Dialogue, Speaker, Split, TextCorpus, Turn, CORPUS_SCHEMA_VERSION};
pub use example::{
    build_lm_sequence, build_prompt, build_training_example, dialogue_examples, eval_items,
    reply_sequences, sample_distractors, Candidate, ExampleConfig, LmSequence, ReplyPool,
    TokenizedExample,
};
pub use tokenizer::{SpecialTokens, Tokenizer, NUM_SPECIAL_TOKENS};
pub use translate::{
    client_from_spec, translate_corpus, CipherClient, DroppedDialogue, IdentityClient,
    TranslatedCorpus, TranslationClient, TranslationError, WordCipher,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation{}: {reason}", .dialogue.map(|d| format!(" in dialogue {d}")).unwrap_or_default())]
    Schema {
        dialogue: Option<usize>,
        reason: String,
    },
    #[error("unsupported corpus schema version {0}")]
    UnsupportedVersion(u32),
    #[error("corpus has no dialogues")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("example cannot fit in {max_len} tokens: {reason}")]
    UnsatisfiableLength { max_len: usize, reason: String },
    #[error("cannot sample {wanted} distractors: only {available} distinct replies besides the gold one")]
    InsufficientReplies { wanted: usize, available: usize },
    #[error("malformed tokenizer file: {0}")]
    Tokenizer(String),
    #[error("translation direction mismatch: corpus is {corpus}, client translates from {client}")]
    LanguageMismatch { corpus: String, client: String },
}
