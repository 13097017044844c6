//! Persona-dialogue corpus files.
//!
//! Schema (version 1):
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "language": "en",
//!   "split": "train" | "validation" | "test",
//!   "dialogues": [
//!     {
//!       "persona": ["i like music .", "..."],
//!       "turns": [
//!         {"speaker": "user", "text": "hi !"},
//!         {"speaker": "bot", "text": "hello .", "candidates": ["distractor", "..."]}
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! `candidates` is optional, allowed on bot turns only, and lists
//! distractor replies (the gold reply is the turn's `text`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Bot,
}

impl Speaker {
    pub fn other(self) -> Self {
        match self {
            Speaker::User => Speaker::Bot,
            Speaker::Bot => Speaker::User,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
            candidates: None,
        }
    }

    pub fn bot(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::Bot,
            text: text.into(),
            candidates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub persona: Vec<String>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<(), String> {
        if self.turns.is_empty() {
            return Err("dialogue has no turns".into());
        }
        if let Some(i) = self.persona.iter().position(|p| p.trim().is_empty()) {
            return Err(format!("persona sentence {i} is empty"));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.text.trim().is_empty() {
                return Err(format!("turn {i} has empty text"));
            }
            if i > 0 && self.turns[i - 1].speaker == turn.speaker {
                return Err(format!("turn {i} repeats speaker {:?}", turn.speaker));
            }
            if turn.candidates.is_some() && turn.speaker != Speaker::Bot {
                return Err(format!(
                    "turn {i}: candidates are only allowed on bot turns"
                ));
            }
        }
        Ok(())
    }

    /// Indices of bot turns, each of which is one supervised example.
    pub fn bot_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.speaker == Speaker::Bot)
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema_version: u32,
    pub language: String,
    pub split: Split,
    pub dialogues: Vec<Dialogue>,
}

#[derive(Deserialize)]
struct RawCorpus {
    schema_version: u32,
    language: String,
    split: Split,
    dialogues: Vec<serde_json::Value>,
}

impl Corpus {
    pub fn new(language: impl Into<String>, split: Split, dialogues: Vec<Dialogue>) -> Self {
        Self {
            schema_version: CORPUS_SCHEMA_VERSION,
            language: language.into(),
            split,
            dialogues,
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let raw: RawCorpus = serde_json::from_str(text).map_err(|e| DataError::Schema {
            dialogue: None,
            reason: e.to_string(),
        })?;
        if raw.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(DataError::UnsupportedVersion(raw.schema_version));
        }
        if raw.language.trim().is_empty() {
            return Err(DataError::Schema {
                dialogue: None,
                reason: "empty language tag".into(),
            });
        }
        if raw.dialogues.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        let dialogues = raw
            .dialogues
            .into_iter()
            .enumerate()
            .map(|(i, value)| {
                let d: Dialogue = serde_json::from_value(value).map_err(|e| DataError::Schema {
                    dialogue: Some(i),
                    reason: e.to_string(),
                })?;
                d.validate().map_err(|reason| DataError::Schema {
                    dialogue: Some(i),
                    reason,
                })?;
                Ok(d)
            })
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(Self {
            schema_version: raw.schema_version,
            language: raw.language,
            split: raw.split,
            dialogues,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("corpus serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| DataError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        fs::write(path, self.to_json()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn num_dialogues(&self) -> usize {
        self.dialogues.len()
    }

    pub fn num_utterances(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    /// SHA-256 of the compact JSON encoding; used in manifests and reports.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("corpus serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// First `n` dialogues, e.g. for few-shot adaptation.
    pub fn take(&self, n: usize) -> Self {
        Self {
            dialogues: self.dialogues.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }

    /// Every persona sentence, turn and candidate, e.g. for tokenizer training.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.dialogues.iter().flat_map(|d| {
            d.persona
                .iter()
                .map(String::as_str)
                .chain(d.turns.iter().flat_map(|t| {
                    std::iter::once(t.text.as_str())
                        .chain(t.candidates.iter().flatten().map(String::as_str))
                }))
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Plain monolingual text, one document per non-empty line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextCorpus {
    pub language: String,
    pub lines: Vec<String>,
}

impl TextCorpus {
    pub fn new(language: impl Into<String>, lines: Vec<String>) -> Self {
        Self {
            language: language.into(),
            lines,
        }
    }

    pub fn load(path: &Path, language: &str) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let lines: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        if lines.is_empty() {
            return Err(DataError::EmptyCorpus);
        }
        Ok(Self::new(language, lines))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.lines.join("\n") + "\n").map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.language.as_bytes());
        for l in &self.lines {
            h.update(b"\n");
            h.update(l.as_bytes());
        }
        hex::encode(h.finalize())
    }
}
