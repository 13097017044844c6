//! Decoder-only transformer with a causal language-modeling head (tied to the
//! token embedding) and a multiple-choice scoring head.
//!
//! ```text
//! tokens, segments, positions
//!     -> token + segment + position embeddings
//!     -> N x [ LN -> causal attention -> residual
//!              LN -> GELU feed-forward -> residual
//!              language adapter -> task adapter ]      (adapters optional)
//!     -> final LN -> hidden states
//!        |-> hidden · token_embeddingᵀ   = vocabulary logits
//!        '-> hidden[cls] · w_mc + b_mc   = candidate score
//! ```
//!
//! Gradients are computed by explicit backward kernels rather than a tape;
//! everything runs in `f64` so finite-difference checks are meaningful.

mod decode;
mod loss;
pub mod ops;
mod params;
mod transformer;

pub use decode::{greedy_decode, sample_decode, Prompt, SamplingConfig};
pub use loss::{combined_loss, lm_loss, lm_loss_with_grad, mc_loss_with_grad, LmLoss, LossWeights};
pub use params::{changed_parameters, Grads, ParamId, ParamStore, Parameter};
pub use transformer::{DropoutCtx, ForwardOutput, ForwardPass, PackedBatch, TransformerModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SEGMENT_PERSONA: u32 = 0;
pub const SEGMENT_USER: u32 = 1;
pub const SEGMENT_BOT: u32 = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} at position {position} is outside the vocabulary ({vocab_size})")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },
    #[error("segment id {id} at position {position} is outside 0..{n_segments}")]
    SegmentOutOfRange {
        id: u32,
        position: usize,
        n_segments: usize,
    },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("degenerate batch: no supervised positions")]
    DegenerateBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub n_segments: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// CPU-sized default: 4 layers, width 128, 4 heads, 256 positions.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            n_segments: 3,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::Config("max_seq_len must be at least 2".into()));
        }
        if self.n_segments < 3 {
            return Err(ModelError::Config(
                "n_segments must be at least 3 (persona/user/bot)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form backbone + head parameter count (token embedding shared with the LM head).
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_block = 2 * d // ln1
            + d * 3 * d + 3 * d // qkv
            + d * d + d // attention output
            + 2 * d // ln2
            + d * self.d_ff + self.d_ff
            + self.d_ff * d + d;
        self.vocab_size * d
            + self.n_segments * d
            + self.max_seq_len * d
            + self.n_layers * per_block
            + 2 * d // final norm
            + d + 1 // multiple-choice head
    }
}
