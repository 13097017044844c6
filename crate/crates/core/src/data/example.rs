//! Serialization of dialogue turns into model inputs.
//!
//! Every candidate sequence is laid out as
//!
//! ```text
//! <bos> <persona> persona... (<user>|<bot>) turn ... <bot> reply <eos> <cls>
//! ```
//!
//! with segment ids persona / user / bot per region. The LM targets cover the
//! gold reply and its `<eos>`; the multiple-choice head reads the `<cls>`
//! position.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, DataError, Dialogue, Speaker, Tokenizer, Turn};
use crate::model::{Prompt, SEGMENT_BOT, SEGMENT_PERSONA, SEGMENT_USER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleConfig {
    pub max_len: usize,
    /// Persona sentences beyond this count are ignored.
    pub persona_cap: usize,
    /// Most recent history turns kept before length-based truncation.
    pub history_window: Option<usize>,
    pub num_distractors: usize,
}

impl ExampleConfig {
    pub fn new(max_len: usize) -> Self {
        Self {
            max_len,
            persona_cap: 5,
            history_window: None,
            num_distractors: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    pub cls_position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedExample {
    /// The gold candidate sequence.
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    /// `lm_labels[i]` is the supervised next token at position `i`.
    pub lm_labels: Vec<Option<u32>>,
    /// Token range `[start, end)` of the gold reply text (without `<eos>`).
    pub reply_span: (usize, usize),
    pub candidates: Vec<Candidate>,
    pub gold_index: usize,
}

/// A plain causal-LM training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmSequence {
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    pub lm_labels: Vec<Option<u32>>,
}

impl LmSequence {
    pub fn supervised(&self) -> usize {
        self.lm_labels.iter().filter(|l| l.is_some()).count()
    }
}

impl TokenizedExample {
    pub fn lm_sequence(&self) -> LmSequence {
        LmSequence {
            tokens: self.tokens.clone(),
            segments: self.segments.clone(),
            lm_labels: self.lm_labels.clone(),
        }
    }

    pub fn gold_reply(&self) -> &[u32] {
        &self.tokens[self.reply_span.0..self.reply_span.1]
    }

    /// Start of the gold reply region, i.e. the `<bot>` token preceding it.
    pub fn context_len(&self) -> usize {
        self.reply_span.0 - 1
    }
}

struct Context {
    persona: (Vec<u32>, Vec<u32>),
    turns: Vec<(Vec<u32>, Vec<u32>)>,
}

impl Context {
    fn new(persona: &[String], history: &[Turn], tok: &Tokenizer, cfg: &ExampleConfig) -> Self {
        let sp = tok.special();
        let mut p_tokens = vec![sp.bos, sp.persona];
        for sentence in persona.iter().take(cfg.persona_cap) {
            p_tokens.extend(tok.encode(&format!(" {}", sentence.trim())));
        }
        let p_segments = vec![SEGMENT_PERSONA; p_tokens.len()];
        let skip = cfg
            .history_window
            .map_or(0, |w| history.len().saturating_sub(w));
        let turns = history[skip..]
            .iter()
            .map(|t| {
                let (marker, seg) = match t.speaker {
                    Speaker::User => (sp.user, SEGMENT_USER),
                    Speaker::Bot => (sp.bot, SEGMENT_BOT),
                };
                let mut tokens = vec![marker];
                tokens.extend(tok.encode(&format!(" {}", t.text.trim())));
                let segments = vec![seg; tokens.len()];
                (tokens, segments)
            })
            .collect();
        Self {
            persona: (p_tokens, p_segments),
            turns,
        }
    }

    fn len(&self) -> usize {
        self.persona.0.len() + self.turns.iter().map(|t| t.0.len()).sum::<usize>()
    }

    /// Drops the oldest history turns until `extra` more tokens fit.
    fn fit(&mut self, extra: usize, max_len: usize) -> bool {
        while self.len() + extra > max_len && !self.turns.is_empty() {
            self.turns.remove(0);
        }
        self.len() + extra <= max_len
    }

    fn flatten(&self) -> (Vec<u32>, Vec<u32>) {
        let mut tokens = self.persona.0.clone();
        let mut segments = self.persona.1.clone();
        for (t, s) in &self.turns {
            tokens.extend_from_slice(t);
            segments.extend_from_slice(s);
        }
        (tokens, segments)
    }
}

fn encode_reply(text: &str, tok: &Tokenizer) -> Vec<u32> {
    tok.encode(&format!(" {}", text.trim()))
}

/// Lays out one supervised turn. Truncation drops the oldest history turns
/// first and never touches the persona or the gold reply; over-long
/// distractors are cut to fit.
pub fn build_training_example(
    persona: &[String],
    history: &[Turn],
    gold: &str,
    distractors: &[String],
    tok: &Tokenizer,
    cfg: &ExampleConfig,
) -> Result<TokenizedExample, DataError> {
    if let Some(d) = distractors.iter().find(|d| d.trim() == gold.trim()) {
        return Err(DataError::Config(format!(
            "distractor {d:?} equals the gold reply"
        )));
    }
    let sp = tok.special();
    let gold_ids = encode_reply(gold, tok);
    // <bot> reply <eos> <cls>
    let wrap = 3;
    let gold_len = gold_ids.len() + wrap;
    let mut ctx = Context::new(persona, history, tok, cfg);
    if ctx.persona.0.len() + gold_len > cfg.max_len {
        return Err(DataError::UnsatisfiableLength {
            max_len: cfg.max_len,
            reason: format!(
                "persona ({} tokens) plus gold reply ({} tokens) do not fit",
                ctx.persona.0.len(),
                gold_len
            ),
        });
    }
    let mut replies: Vec<Vec<u32>> = distractors.iter().map(|d| encode_reply(d, tok)).collect();
    let longest = replies
        .iter()
        .map(Vec::len)
        .max()
        .unwrap_or(0)
        .max(gold_ids.len());
    if !ctx.fit(longest + wrap, cfg.max_len) {
        let room = cfg.max_len - ctx.len() - wrap;
        for r in &mut replies {
            r.truncate(room);
        }
    }
    replies.push(gold_ids);
    let gold_index = replies.len() - 1;

    let (ctx_tokens, ctx_segments) = ctx.flatten();
    let candidates: Vec<Candidate> = replies
        .iter()
        .map(|reply| {
            let mut tokens = ctx_tokens.clone();
            let mut segments = ctx_segments.clone();
            tokens.push(sp.bot);
            tokens.extend_from_slice(reply);
            tokens.push(sp.eos);
            tokens.push(sp.cls);
            segments.resize(tokens.len(), SEGMENT_BOT);
            Candidate {
                cls_position: tokens.len() - 1,
                tokens,
                segments,
            }
        })
        .collect();
    let gold_seq = &candidates[gold_index];
    let start = ctx_tokens.len() + 1;
    let end = start + replies[gold_index].len();
    let mut lm_labels = vec![None; gold_seq.tokens.len()];
    // Position p predicts p + 1: from the <bot> marker through the last reply
    // token, whose target is <eos>.
    for (p, label) in lm_labels.iter_mut().enumerate().take(end).skip(start - 1) {
        *label = Some(gold_seq.tokens[p + 1]);
    }
    Ok(TokenizedExample {
        tokens: gold_seq.tokens.clone(),
        segments: gold_seq.segments.clone(),
        lm_labels,
        reply_span: (start, end),
        candidates,
        gold_index,
    })
}

/// Generation prefix ending in the `<bot>` marker, truncated so that
/// `max_new` tokens still fit.
pub fn build_prompt(
    persona: &[String],
    history: &[Turn],
    tok: &Tokenizer,
    cfg: &ExampleConfig,
    max_new: usize,
) -> Result<Prompt, DataError> {
    let mut ctx = Context::new(persona, history, tok, cfg);
    if !ctx.fit(1 + max_new, cfg.max_len) {
        return Err(DataError::UnsatisfiableLength {
            max_len: cfg.max_len,
            reason: format!("persona plus {max_new} generated tokens do not fit"),
        });
    }
    let (mut tokens, mut segments) = ctx.flatten();
    tokens.push(tok.special().bot);
    segments.push(SEGMENT_BOT);
    Ok(Prompt {
        tokens,
        segments,
        continuation_segment: SEGMENT_BOT,
    })
}

/// `<bos> text <eos>` with every next token supervised; segment 0 throughout.
pub fn build_lm_sequence(
    text: &str,
    tok: &Tokenizer,
    max_len: usize,
) -> Result<LmSequence, DataError> {
    let sp = tok.special();
    let mut tokens = vec![sp.bos];
    tokens.extend(tok.encode(text.trim()));
    tokens.push(sp.eos);
    tokens.truncate(max_len);
    if tokens.len() < 2 {
        return Err(DataError::UnsatisfiableLength {
            max_len,
            reason: "need at least one supervised position".into(),
        });
    }
    let mut lm_labels: Vec<Option<u32>> = tokens[1..].iter().map(|&t| Some(t)).collect();
    lm_labels.push(None);
    Ok(LmSequence {
        segments: vec![SEGMENT_PERSONA; tokens.len()],
        tokens,
        lm_labels,
    })
}

/// Distinct bot replies of a corpus, the source of sampled distractors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyPool {
    replies: Vec<String>,
}

impl ReplyPool {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let set: BTreeSet<String> = corpus
            .dialogues
            .iter()
            .flat_map(|d| d.turns.iter())
            .filter(|t| t.speaker == Speaker::Bot)
            .map(|t| t.text.trim().to_owned())
            .collect();
        Self {
            replies: set.into_iter().collect(),
        }
    }

    pub fn from_replies(replies: impl IntoIterator<Item = String>) -> Self {
        let set: BTreeSet<String> = replies.into_iter().map(|r| r.trim().to_owned()).collect();
        Self {
            replies: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

/// Draws `n` pairwise-distinct replies other than `exclude`, uniformly
/// without replacement.
pub fn sample_distractors<R: Rng + ?Sized>(
    pool: &ReplyPool,
    n: usize,
    exclude: &str,
    rng: &mut R,
) -> Result<Vec<String>, DataError> {
    let exclude = exclude.trim();
    let eligible: Vec<&String> = pool
        .replies
        .iter()
        .filter(|r| r.as_str() != exclude)
        .collect();
    if eligible.len() < n {
        return Err(DataError::InsufficientReplies {
            wanted: n,
            available: eligible.len(),
        });
    }
    Ok(index::sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i].clone())
        .collect())
}

fn turn_distractors<R: Rng + ?Sized>(
    turn: &Turn,
    pool: &ReplyPool,
    n: usize,
    rng: &mut R,
) -> Result<Vec<String>, DataError> {
    let gold = turn.text.trim();
    let mut out: Vec<String> = Vec::new();
    for c in turn.candidates.iter().flatten() {
        let c = c.trim();
        if out.len() < n && c != gold && !out.iter().any(|o| o == c) {
            out.push(c.to_owned());
        }
    }
    if out.is_empty() {
        out = sample_distractors(pool, n, gold, rng)?;
    } else if out.len() < n {
        let extra =
            ReplyPool::from_replies(pool.replies.iter().filter(|r| !out.contains(r)).cloned());
        out.extend(sample_distractors(&extra, n - out.len(), gold, rng)?);
    }
    Ok(out)
}

fn one_dialogue<R: Rng + ?Sized>(
    dialogue: &Dialogue,
    pool: &ReplyPool,
    tok: &Tokenizer,
    cfg: &ExampleConfig,
    rng: &mut R,
    out: &mut Vec<TokenizedExample>,
) -> Result<(), DataError> {
    for i in dialogue.bot_turns() {
        let turn = &dialogue.turns[i];
        let distractors = turn_distractors(turn, pool, cfg.num_distractors, rng)?;
        out.push(build_training_example(
            &dialogue.persona,
            &dialogue.turns[..i],
            &turn.text,
            &distractors,
            tok,
            cfg,
        )?);
    }
    Ok(())
}

/// One example per bot turn. Native candidates are used first; missing
/// distractors are sampled from the corpus' own replies.
pub fn dialogue_examples<R: Rng + ?Sized>(
    corpus: &Corpus,
    tok: &Tokenizer,
    cfg: &ExampleConfig,
    rng: &mut R,
) -> Result<Vec<TokenizedExample>, DataError> {
    let pool = ReplyPool::from_corpus(corpus);
    let mut out = Vec::new();
    for (i, d) in corpus.dialogues.iter().enumerate() {
        one_dialogue(d, &pool, tok, cfg, rng, &mut out).map_err(|e| match e {
            DataError::UnsatisfiableLength { max_len, reason } => DataError::UnsatisfiableLength {
                max_len,
                reason: format!("dialogue {i}: {reason}"),
            },
            other => other,
        })?;
    }
    Ok(out)
}

/// The gold-reply LM sequence of every bot turn (no distractors needed).
pub fn reply_sequences(
    corpus: &Corpus,
    tok: &Tokenizer,
    cfg: &ExampleConfig,
) -> Result<Vec<LmSequence>, DataError> {
    let mut out = Vec::new();
    for (n, d) in corpus.dialogues.iter().enumerate() {
        for i in d.bot_turns() {
            let ex =
                build_training_example(&d.persona, &d.turns[..i], &d.turns[i].text, &[], tok, cfg)
                    .map_err(|e| match e {
                        DataError::UnsatisfiableLength { max_len, reason } => {
                            DataError::UnsatisfiableLength {
                                max_len,
                                reason: format!("dialogue {n}: {reason}"),
                            }
                        }
                        other => other,
                    })?;
            out.push(ex.lm_sequence());
        }
    }
    Ok(out)
}

/// Evaluation items with a fixed distractor draw.
pub fn eval_items(
    corpus: &Corpus,
    tok: &Tokenizer,
    cfg: &ExampleConfig,
    seed: u64,
) -> Result<Vec<TokenizedExample>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dialogue_examples(corpus, tok, cfg, &mut rng)
}
