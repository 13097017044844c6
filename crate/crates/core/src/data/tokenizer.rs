//! Byte-level BPE.
//!
//! Ids `0..7` are the special tokens, `7..263` the 256 raw bytes, and every
//! later id is a learned merge. Plain text only ever encodes to byte and
//! merge ids, so special tokens cannot be forged from user input.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const NUM_SPECIAL_TOKENS: u32 = 7;
const BYTE_OFFSET: u32 = NUM_SPECIAL_TOKENS;
const FIRST_MERGE: u32 = BYTE_OFFSET + 256;
const FORMAT: &str = "bpe-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: u32,
    pub eos: u32,
    pub user: u32,
    pub bot: u32,
    pub persona: u32,
    pub pad: u32,
    pub cls: u32,
}

impl SpecialTokens {
    const FIXED: SpecialTokens = SpecialTokens {
        bos: 0,
        eos: 1,
        user: 2,
        bot: 3,
        persona: 4,
        pad: 5,
        cls: 6,
    };

    pub fn name(&self, id: u32) -> Option<&'static str> {
        Some(match id {
            0 => "<bos>",
            1 => "<eos>",
            2 => "<user>",
            3 => "<bot>",
            4 => "<persona>",
            5 => "<pad>",
            6 => "<cls>",
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TokenizerFile {
    format: String,
    vocab_size: usize,
    special_tokens: BTreeMap<String, u32>,
    merges: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

/// Splits text into chunks that each carry their leading whitespace, so
/// merges never cross a word boundary.
fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                out.push(&text[start..i]);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn byte_ids(chunk: &str) -> Vec<u32> {
    chunk.bytes().map(|b| BYTE_OFFSET + b as u32).collect()
}

impl Tokenizer {
    fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self, DataError> {
        let mut pieces: Vec<Vec<u8>> = (0..NUM_SPECIAL_TOKENS).map(|_| Vec::new()).collect();
        pieces.extend((0..=255u8).map(|b| vec![b]));
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let next = FIRST_MERGE + rank as u32;
            if a < BYTE_OFFSET || b < BYTE_OFFSET || a >= next || b >= next {
                return Err(DataError::Tokenizer(format!(
                    "merge {rank} references invalid ids ({a}, {b})"
                )));
            }
            if ranks.insert((a, b), rank as u32).is_some() {
                return Err(DataError::Tokenizer(format!(
                    "merge {rank} duplicates ({a}, {b})"
                )));
            }
            let mut piece = pieces[a as usize].clone();
            piece.extend_from_slice(&pieces[b as usize]);
            pieces.push(piece);
        }
        Ok(Self {
            merges,
            ranks,
            pieces,
        })
    }

    /// Learns merges until the vocabulary reaches `vocab_size` or no pair
    /// occurs twice. Pair-count ties go to the numerically smallest pair,
    /// which makes training a pure function of the input.
    pub fn train<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        vocab_size: usize,
    ) -> Result<Self, DataError> {
        if vocab_size <= FIRST_MERGE as usize {
            return Err(DataError::Config(format!(
                "vocab_size must exceed {FIRST_MERGE} (special tokens plus byte fallback), got {vocab_size}"
            )));
        }
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for text in texts {
            for chunk in pre_tokenize(text) {
                *freq.entry(chunk).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(DataError::Config("tokenizer training text is empty".into()));
        }
        let mut words: Vec<(Vec<u32>, u64)> =
            freq.into_iter().map(|(w, c)| (byte_ids(w), c)).collect();
        let mut merges = Vec::new();
        while FIRST_MERGE as usize + merges.len() < vocab_size {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (ids, c) in &words {
                for w in ids.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)));
            let Some((pair, _)) = best else { break };
            let new_id = FIRST_MERGE + merges.len() as u32;
            merges.push(pair);
            for (ids, _) in &mut words {
                merge_pair(ids, pair, new_id);
            }
        }
        Self::from_merges(merges)
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn special(&self) -> SpecialTokens {
        SpecialTokens::FIXED
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < NUM_SPECIAL_TOKENS
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pre_tokenize(text) {
            let mut ids = byte_ids(chunk);
            loop {
                let best = ids
                    .windows(2)
                    .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
                    .min();
                let Some((rank, pair)) = best else { break };
                merge_pair(&mut ids, pair, FIRST_MERGE + rank);
            }
            out.extend(ids);
        }
        out
    }

    /// Decodes text tokens; special tokens are skipped.
    pub fn decode(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter_map(|&id| self.pieces.get(id as usize))
            .flatten()
            .copied()
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Human-readable rendering that keeps special tokens, for logs.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut run = Vec::new();
        for &id in ids {
            if let Some(name) = self.special().name(id) {
                out.push_str(&self.decode(&run));
                run.clear();
                out.push_str(name);
            } else {
                run.push(id);
            }
        }
        out.push_str(&self.decode(&run));
        out
    }

    pub fn to_json(&self) -> String {
        let s = self.special();
        let special_tokens = [
            ("bos", s.bos),
            ("eos", s.eos),
            ("user", s.user),
            ("bot", s.bot),
            ("persona", s.persona),
            ("pad", s.pad),
            ("cls", s.cls),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect();
        let file = TokenizerFile {
            format: FORMAT.into(),
            vocab_size: self.vocab_size(),
            special_tokens,
            merges: self.merges.clone(),
        };
        serde_json::to_string_pretty(&file).expect("tokenizer serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let file: TokenizerFile =
            serde_json::from_str(text).map_err(|e| DataError::Tokenizer(e.to_string()))?;
        if file.format != FORMAT {
            return Err(DataError::Tokenizer(format!(
                "unknown format {:?}",
                file.format
            )));
        }
        let tok = Self::from_merges(file.merges)?;
        if tok.vocab_size() != file.vocab_size {
            return Err(DataError::Tokenizer(format!(
                "declared vocab_size {} but merges give {}",
                file.vocab_size,
                tok.vocab_size()
            )));
        }
        let s = tok.special();
        let expected = [
            ("bos", s.bos),
            ("eos", s.eos),
            ("user", s.user),
            ("bot", s.bot),
            ("persona", s.persona),
            ("pad", s.pad),
            ("cls", s.cls),
        ];
        for (name, id) in expected {
            if file.special_tokens.get(name) != Some(&id) {
                return Err(DataError::Tokenizer(format!(
                    "special token {name} must have id {id}"
                )));
            }
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_json()).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

fn merge_pair(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    *ids = out;
}
