//! Automatic metrics (perplexity, Hits@k, BLEU) and rater agreement.

mod bleu;
mod kappa;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bleu::{bleu, BleuScore, Smoothing};
pub use kappa::{fleiss_kappa, RatingsMatrix};

use crate::data::{
    build_prompt, eval_items, reply_sequences, Corpus, DataError, ExampleConfig, LmSequence, Split,
    TokenizedExample, Tokenizer,
};
use crate::model::{greedy_decode, lm_loss, ModelError, PackedBatch, TransformerModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("invalid metric input: {0}")]
    Input(String),
    #[error("Fleiss' kappa is undefined: all ratings fall in a single category")]
    UndefinedKappa,
    #[error("evaluation requires the test split, got {0:?}")]
    WrongSplit(Split),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Sequences per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

/// Summed NLL and supervised-token count over `seqs`.
pub fn sequence_nll(
    model: &TransformerModel,
    seqs: &[LmSequence],
) -> Result<(f64, usize), EvalError> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let mut batch = PackedBatch::new();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for s in chunk {
            let start = batch.push(&s.tokens, &s.segments);
            for (p, label) in s.lm_labels.iter().enumerate() {
                if let Some(t) = label {
                    rows.push(start + p);
                    targets.push(*t);
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let pass = model.forward_packed(&batch, None)?;
        let logits = model.lm_logits(&pass.hidden, &rows);
        let mask = vec![true; rows.len()];
        let l = lm_loss(logits.view(), &targets, &mask)?;
        total += l.total_nll;
        count += l.count;
    }
    Ok((total, count))
}

/// exp of the mean per-token NLL over every supervised position.
pub fn perplexity_of_sequences(
    model: &TransformerModel,
    seqs: &[LmSequence],
) -> Result<f64, EvalError> {
    let (total, count) = sequence_nll(model, seqs)?;
    if count == 0 {
        return Err(EvalError::Empty("no supervised tokens".into()));
    }
    Ok((total / count as f64).exp())
}

/// Perplexity of the gold replies of a dialogue corpus.
pub fn perplexity(
    model: &TransformerModel,
    corpus: &Corpus,
    tok: &Tokenizer,
    cfg: &ExampleConfig,
) -> Result<f64, EvalError> {
    perplexity_of_sequences(model, &reply_sequences(corpus, tok, cfg)?)
}

/// Multiple-choice scores for every candidate of an item.
pub fn candidate_scores(
    model: &TransformerModel,
    item: &TokenizedExample,
    cls: u32,
) -> Result<Vec<f64>, EvalError> {
    let mut batch = PackedBatch::new();
    let mut rows = Vec::new();
    for (i, c) in item.candidates.iter().enumerate() {
        let marks = c.tokens.iter().filter(|&&t| t == cls).count();
        if c.tokens.get(c.cls_position) != Some(&cls) || marks != 1 {
            return Err(EvalError::Input(format!(
                "candidate {i} must carry exactly one classification token at its cls position"
            )));
        }
        rows.push(batch.push(&c.tokens, &c.segments) + c.cls_position);
    }
    let pass = model.forward_packed(&batch, None)?;
    Ok(model.mc_scores_at(&pass.hidden, &rows))
}

/// 1-based rank of the gold candidate; every candidate scoring at least as
/// high as the gold one is ranked ahead of it.
pub fn gold_rank(scores: &[f64], gold: usize) -> Result<usize, EvalError> {
    let g = *scores.get(gold).ok_or_else(|| {
        EvalError::Input(format!(
            "gold index {gold} outside {} candidates",
            scores.len()
        ))
    })?;
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != gold && s >= g)
        .count())
}

/// Fraction of items whose gold candidate ranks within the top `k`.
pub fn hits_at_k_from_scores(items: &[(Vec<f64>, usize)], k: usize) -> Result<f64, EvalError> {
    if items.is_empty() {
        return Err(EvalError::Empty("no ranking items".into()));
    }
    let mut hits = 0usize;
    for (scores, gold) in items {
        if gold_rank(scores, *gold)? <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / items.len() as f64)
}

pub fn hits_at_k(
    model: &TransformerModel,
    items: &[TokenizedExample],
    cls: u32,
    k: usize,
) -> Result<f64, EvalError> {
    let scored = items
        .iter()
        .map(|it| Ok((candidate_scores(model, it, cls)?, it.gold_index)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    hits_at_k_from_scores(&scored, k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub examples: ExampleConfig,
    /// Seed of the distractor draw.
    pub seed: u64,
    pub max_new_tokens: usize,
    pub bleu_max_n: usize,
    pub smoothing: Smoothing,
    pub model_id: String,
    pub strategy: String,
}

impl EvalConfig {
    pub fn new(max_len: usize) -> Self {
        Self {
            examples: ExampleConfig::new(max_len),
            seed: 0,
            max_new_tokens: 32,
            bleu_max_n: 4,
            smoothing: Smoothing::default(),
            model_id: "model".into(),
            strategy: "unspecified".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub dialogues: usize,
    pub items: usize,
    pub supervised_tokens: usize,
    pub candidates_per_item: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub strategy: String,
    pub language: String,
    pub perplexity: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub bleu: f64,
    pub bleu_smoothing: String,
    pub counts: MetricCounts,
    /// Checkpoint hash, corpus hash, decoding parameters and the like.
    pub provenance: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Input(format!("report: {e}")))
    }
}

/// Greedy reply for every bot turn, decoded to text.
pub fn greedy_replies(
    model: &TransformerModel,
    corpus: &Corpus,
    tok: &Tokenizer,
    cfg: &ExampleConfig,
    max_new: usize,
) -> Result<Vec<(String, String)>, EvalError> {
    let eos = tok.special().eos;
    let mut out = Vec::new();
    for d in &corpus.dialogues {
        for i in d.bot_turns() {
            let prompt = build_prompt(&d.persona, &d.turns[..i], tok, cfg, max_new)?;
            let ids = greedy_decode(model, &prompt, max_new, eos)?;
            out.push((
                tok.decode(&ids).trim().to_owned(),
                d.turns[i].text.trim().to_owned(),
            ));
        }
    }
    Ok(out)
}

/// Perplexity, Hits@1/3 and greedy-decoding BLEU on a test corpus.
pub fn evaluate_model(
    model: &TransformerModel,
    tok: &Tokenizer,
    corpus: &Corpus,
    cfg: &EvalConfig,
) -> Result<MetricReport, EvalError> {
    if corpus.split != Split::Test {
        return Err(EvalError::WrongSplit(corpus.split));
    }
    let seqs = reply_sequences(corpus, tok, &cfg.examples)?;
    let (nll, supervised) = sequence_nll(model, &seqs)?;
    if supervised == 0 {
        return Err(EvalError::Empty("no supervised tokens".into()));
    }
    let items = eval_items(corpus, tok, &cfg.examples, cfg.seed)?;
    let cls = tok.special().cls;
    let scored = items
        .iter()
        .map(|it| Ok((candidate_scores(model, it, cls)?, it.gold_index)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    let pairs = greedy_replies(model, corpus, tok, &cfg.examples, cfg.max_new_tokens)?;
    let (hyps, refs): (Vec<String>, Vec<String>) = pairs.into_iter().unzip();
    let b = bleu(&hyps, &refs, cfg.bleu_max_n, cfg.smoothing)?;
    let mut provenance = BTreeMap::new();
    provenance.insert("corpus_sha256".into(), corpus.content_hash());
    provenance.insert(
        "decoding".into(),
        format!("greedy, max_new_tokens={}", cfg.max_new_tokens),
    );
    provenance.insert("distractor_seed".into(), cfg.seed.to_string());
    Ok(MetricReport {
        model_id: cfg.model_id.clone(),
        strategy: cfg.strategy.clone(),
        language: corpus.language.clone(),
        perplexity: (nll / supervised as f64).exp(),
        hits_at_1: hits_at_k_from_scores(&scored, 1)?,
        hits_at_3: hits_at_k_from_scores(&scored, 3)?,
        bleu: b.score,
        bleu_smoothing: b.smoothing.describe(),
        counts: MetricCounts {
            dialogues: corpus.num_dialogues(),
            items: items.len(),
            supervised_tokens: supervised,
            candidates_per_item: cfg.examples.num_distractors + 1,
        },
        provenance,
    })
}
