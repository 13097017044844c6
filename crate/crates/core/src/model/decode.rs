use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::argmax;
use super::{ModelError, TransformerModel};

/// A decoding prefix. Generated tokens are tagged with `continuation_segment`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub segments: Vec<u32>,
    pub continuation_segment: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<(), ModelError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(ModelError::Config(format!(
                "top_k must lie in 1..={vocab_size}, got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

fn check_prompt(
    model: &TransformerModel,
    prompt: &Prompt,
    max_new: usize,
) -> Result<(), ModelError> {
    if prompt.tokens.is_empty() {
        return Err(ModelError::Input(
            "decoding needs a non-empty prefix".into(),
        ));
    }
    if prompt.tokens.len() != prompt.segments.len() {
        return Err(ModelError::Input(
            "prefix tokens and segments differ in length".into(),
        ));
    }
    let max = model.config().max_seq_len;
    if prompt.tokens.len() + max_new > max {
        return Err(ModelError::Length {
            len: prompt.tokens.len() + max_new,
            max,
        });
    }
    Ok(())
}

/// Repeatedly appends the arg-max next token. The stop token ends decoding
/// and is not included in the output.
pub fn greedy_decode(
    model: &TransformerModel,
    prompt: &Prompt,
    max_new: usize,
    stop: u32,
) -> Result<Vec<u32>, ModelError> {
    check_prompt(model, prompt, max_new)?;
    let mut tokens = prompt.tokens.clone();
    let mut segments = prompt.segments.clone();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = model.next_token_logits(&tokens, &segments)?;
        let next = argmax(logits.view()) as u32;
        if next == stop {
            break;
        }
        out.push(next);
        tokens.push(next);
        segments.push(prompt.continuation_segment);
    }
    Ok(out)
}

/// Top-k, temperature-scaled ancestral sampling with a seeded generator.
pub fn sample_decode(
    model: &TransformerModel,
    prompt: &Prompt,
    max_new: usize,
    stop: u32,
    cfg: &SamplingConfig,
) -> Result<Vec<u32>, ModelError> {
    cfg.validate(model.config().vocab_size)?;
    check_prompt(model, prompt, max_new)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tokens = prompt.tokens.clone();
    let mut segments = prompt.segments.clone();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let logits = model.next_token_logits(&tokens, &segments)?;
        let mut order: Vec<usize> = (0..logits.len()).collect();
        // Stable sort keeps the lowest index first among equal logits, which
        // makes top_k = 1 coincide with greedy arg-max.
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        order.truncate(cfg.top_k);
        let best = logits[order[0]];
        let weights: Vec<f64> = order
            .iter()
            .map(|&i| ((logits[i] - best) / cfg.temperature).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut next = order[order.len() - 1];
        for (&i, &w) in order.iter().zip(&weights) {
            if u < w {
                next = i;
                break;
            }
            u -= w;
        }
        let next = next as u32;
        if next == stop {
            break;
        }
        out.push(next);
        tokens.push(next);
        segments.push(prompt.continuation_segment);
    }
    Ok(out)
}
