//! Machine-translation clients and corpus translation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Corpus, DataError, Dialogue};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("translation {source_lang}->{target_lang} failed: {reason}")]
pub struct TranslationError {
    pub source_lang: String,
    pub target_lang: String,
    pub reason: String,
}

/// A one-directional translator. Implementations must be deterministic.
pub trait TranslationClient: Send + Sync {
    fn source(&self) -> &str;
    fn target(&self) -> &str;
    fn translate(&self, text: &str) -> Result<String, TranslationError>;
}

#[derive(Debug, Clone)]
pub struct IdentityClient {
    source: String,
    target: String,
}

impl IdentityClient {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }
}

impl TranslationClient for IdentityClient {
    fn source(&self) -> &str {
        &self.source
    }

    fn target(&self) -> &str {
        &self.target
    }

    fn translate(&self, text: &str) -> Result<String, TranslationError> {
        Ok(text.to_owned())
    }
}

/// A keyed pseudo-language: ASCII letters go through a fixed permutation
/// (case preserved) and every whitespace-delimited word is reversed.
/// Whitespace and all other characters pass through, so the mapping is a
/// bijection on strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordCipher {
    forward: [u8; 26],
    inverse: [u8; 26],
}

impl WordCipher {
    pub fn new(key: u64) -> Self {
        let mut perm: Vec<u8> = (0..26).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        let mut forward = [0u8; 26];
        let mut inverse = [0u8; 26];
        for (i, &p) in perm.iter().enumerate() {
            forward[i] = p;
            inverse[p as usize] = i as u8;
        }
        Self { forward, inverse }
    }

    fn map_char(table: &[u8; 26], c: char) -> char {
        match c {
            'a'..='z' => (b'a' + table[(c as u8 - b'a') as usize]) as char,
            'A'..='Z' => (b'A' + table[(c as u8 - b'A') as usize]) as char,
            _ => c,
        }
    }

    fn apply(table: &[u8; 26], text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut word: Vec<char> = Vec::new();
        for c in text.chars() {
            if c.is_whitespace() {
                out.extend(word.drain(..).rev());
                out.push(c);
            } else {
                word.push(Self::map_char(table, c));
            }
        }
        out.extend(word.drain(..).rev());
        out
    }

    pub fn encipher(&self, text: &str) -> String {
        Self::apply(&self.forward, text)
    }

    pub fn decipher(&self, text: &str) -> String {
        Self::apply(&self.inverse, text)
    }
}

#[derive(Debug, Clone)]
pub struct CipherClient {
    source: String,
    target: String,
    cipher: WordCipher,
    inverse: bool,
}

impl CipherClient {
    /// Translates plain text into the cipher language.
    pub fn encipher(source: impl Into<String>, target: impl Into<String>, key: u64) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
            cipher: WordCipher::new(key),
            inverse: false,
        }
    }

    /// Translates cipher text back into plain text.
    pub fn decipher(source: impl Into<String>, target: impl Into<String>, key: u64) -> Self {
        Self {
            inverse: true,
            ..Self::encipher(source, target, key)
        }
    }

    /// The client translating in the opposite direction.
    pub fn reversed(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
            cipher: self.cipher.clone(),
            inverse: !self.inverse,
        }
    }
}

impl TranslationClient for CipherClient {
    fn source(&self) -> &str {
        &self.source
    }

    fn target(&self) -> &str {
        &self.target
    }

    fn translate(&self, text: &str) -> Result<String, TranslationError> {
        Ok(if self.inverse {
            self.cipher.decipher(text)
        } else {
            self.cipher.encipher(text)
        })
    }
}

/// Builds a client from `identity:SRC:TGT`, `cipher:SRC:TGT:KEY` or
/// `decipher:SRC:TGT:KEY`.
pub fn client_from_spec(spec: &str) -> Result<Box<dyn TranslationClient>, DataError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || DataError::Config(format!("unrecognized translation client {spec:?}"));
    let key = |s: &str| s.parse::<u64>().map_err(|_| bad());
    match parts.as_slice() {
        ["identity", s, t] => Ok(Box::new(IdentityClient::new(*s, *t))),
        ["cipher", s, t, k] => Ok(Box::new(CipherClient::encipher(*s, *t, key(k)?))),
        ["decipher", s, t, k] => Ok(Box::new(CipherClient::decipher(*s, *t, key(k)?))),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedDialogue {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatedCorpus {
    pub corpus: Corpus,
    pub dropped: Vec<DroppedDialogue>,
}

fn translate_dialogue(
    d: &Dialogue,
    client: &dyn TranslationClient,
) -> Result<Dialogue, TranslationError> {
    let persona = d
        .persona
        .iter()
        .map(|p| client.translate(p))
        .collect::<Result<_, _>>()?;
    let mut turns = Vec::with_capacity(d.turns.len());
    for t in &d.turns {
        let mut out = t.clone();
        out.text = client.translate(&t.text)?;
        if let Some(c) = &t.candidates {
            out.candidates = Some(
                c.iter()
                    .map(|x| client.translate(x))
                    .collect::<Result<_, _>>()?,
            );
        }
        turns.push(out);
    }
    let out = Dialogue { persona, turns };
    out.validate().map_err(|reason| TranslationError {
        source_lang: client.source().into(),
        target_lang: client.target().into(),
        reason: format!("translation broke the dialogue: {reason}"),
    })?;
    Ok(out)
}

/// Translates persona sentences, turns and candidates. Dialogues whose
/// translation fails are dropped and logged rather than aborting the run.
pub fn translate_corpus(
    corpus: &Corpus,
    client: &dyn TranslationClient,
) -> Result<TranslatedCorpus, DataError> {
    if client.source() != corpus.language {
        return Err(DataError::LanguageMismatch {
            corpus: corpus.language.clone(),
            client: client.source().into(),
        });
    }
    let mut dialogues = Vec::with_capacity(corpus.dialogues.len());
    let mut dropped = Vec::new();
    for (index, d) in corpus.dialogues.iter().enumerate() {
        match translate_dialogue(d, client) {
            Ok(t) => dialogues.push(t),
            Err(e) => {
                log::warn!("dropping dialogue {index}: {e}");
                dropped.push(DroppedDialogue {
                    index,
                    reason: e.to_string(),
                });
            }
        }
    }
    if dialogues.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(TranslatedCorpus {
        corpus: Corpus::new(client.target(), corpus.split, dialogues),
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, Turn};
    use proptest::prelude::*;

    fn corpus(n: usize) -> Corpus {
        let dialogues = (0..n)
            .map(|i| Dialogue {
                persona: vec![format!("i have {i} cats .")],
                turns: vec![
                    Turn::user(format!("hello number {i}")),
                    Turn::bot("Hi there !"),
                ],
            })
            .collect();
        Corpus::new("en", Split::Train, dialogues)
    }

    struct FailOn(&'static str);

    impl TranslationClient for FailOn {
        fn source(&self) -> &str {
            "en"
        }
        fn target(&self) -> &str {
            "xx"
        }
        fn translate(&self, text: &str) -> Result<String, TranslationError> {
            if text.contains(self.0) {
                Err(TranslationError {
                    source_lang: "en".into(),
                    target_lang: "xx".into(),
                    reason: "service unavailable".into(),
                })
            } else {
                Ok(text.to_owned())
            }
        }
    }

    #[test]
    fn identity_only_changes_language() {
        let c = corpus(4);
        let out = translate_corpus(&c, &IdentityClient::new("en", "fr")).unwrap();
        assert_eq!(out.corpus.language, "fr");
        assert_eq!(out.corpus.dialogues, c.dialogues);
        assert!(out.dropped.is_empty());
    }

    #[test]
    fn cipher_round_trip_restores_corpus() {
        let c = corpus(5);
        let there = CipherClient::encipher("en", "fr", 11);
        let fr = translate_corpus(&c, &there).unwrap().corpus;
        assert_ne!(fr.dialogues, c.dialogues);
        assert_eq!(fr.num_utterances(), c.num_utterances());
        let back = translate_corpus(&fr, &there.reversed()).unwrap().corpus;
        assert_eq!(back, c);
    }

    #[test]
    fn failing_dialogue_is_dropped_and_logged() {
        let c = corpus(10);
        let out = translate_corpus(&c, &FailOn("number 3")).unwrap();
        assert_eq!(out.corpus.num_dialogues(), 9);
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].index, 3);
        assert!(out.dropped[0].reason.contains("unavailable"));
    }

    #[test]
    fn direction_must_match() {
        let c = corpus(1);
        assert!(matches!(
            translate_corpus(&c, &IdentityClient::new("fr", "en")),
            Err(DataError::LanguageMismatch { .. })
        ));
    }

    #[test]
    fn spec_strings() {
        assert_eq!(
            client_from_spec("cipher:en:fr:7")
                .unwrap()
                .translate("ab")
                .unwrap(),
            WordCipher::new(7).encipher("ab")
        );
        assert_eq!(client_from_spec("identity:en:fr").unwrap().target(), "fr");
        assert!(client_from_spec("google:en:fr").is_err());
        assert!(client_from_spec("cipher:en:fr:x").is_err());
    }

    proptest! {
        #[test]
        fn cipher_is_a_bijection(text in "\\PC{0,40}", key in any::<u64>()) {
            let c = WordCipher::new(key);
            prop_assert_eq!(c.decipher(&c.encipher(&text)), text.clone());
            prop_assert_eq!(c.encipher(&c.decipher(&text)), text);
        }
    }
}
