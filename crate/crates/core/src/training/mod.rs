//! Training stages: double-head fine-tuning, causal-LM pretraining,
//! language-adapter training and the two task-adapter stages.

mod objective;
mod optim;
mod trainer;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use objective::{double_head_loss, lm_batch_loss, DoubleHeadLoss};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use trainer::{
    adapt_task_adapter_target, finetune_double_head, pretrain_language_model,
    train_language_adapter, train_task_adapter_source, DialogueData, EvalPoint, StepLog, TextData,
    TrainOutcome,
};

use crate::adapters::AdapterError;
use crate::checkpoint::{load_model, CheckpointError};
use crate::data::{Corpus, DataError, ExampleConfig, Tokenizer};
use crate::eval::{perplexity, EvalError};
use crate::model::{LossWeights, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Finetune,
    /// Causal-LM training of the backbone on plain text.
    Pretrain,
    LangAdapter,
    TaskAdapterSrc,
    TaskAdapterTgt,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Finetune => "finetune",
            Stage::Pretrain => "pretrain",
            Stage::LangAdapter => "lang_adapter",
            Stage::TaskAdapterSrc => "task_adapter_src",
            Stage::TaskAdapterTgt => "task_adapter_tgt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Epochs(usize),
    Steps(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalEvery {
    EpochFraction(f64),
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub duration: Duration,
    pub batch_size: usize,
    pub eval_every: EvalEvery,
    pub checkpoints_kept: usize,
    pub loss_weights: LossWeights,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Double-head fine-tuning: 6.25e-5 with linear decay for one epoch,
    /// evaluated every quarter epoch, five best checkpoints kept.
    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            learning_rate: 6.25e-5,
            schedule: Schedule::LinearDecay,
            duration: Duration::Epochs(1),
            batch_size: 8,
            eval_every: EvalEvery::EpochFraction(0.25),
            checkpoints_kept: 5,
            loss_weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }

    /// Language-adapter training: batch 80, learning rate 1e-4, constant rate.
    pub fn lang_adapter() -> Self {
        Self {
            stage: Stage::LangAdapter,
            learning_rate: 1e-4,
            schedule: Schedule::Constant,
            duration: Duration::Steps(2000),
            batch_size: 80,
            eval_every: EvalEvery::Steps(500),
            checkpoints_kept: 1,
            ..Self::finetune()
        }
    }

    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            ..Self::lang_adapter()
        }
    }

    pub fn task_adapter(stage: Stage) -> Self {
        Self {
            stage,
            learning_rate: 1e-4,
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        match self.duration {
            Duration::Epochs(0) | Duration::Steps(0) => {
                return bad("training duration must be positive".into())
            }
            _ => {}
        }
        match self.eval_every {
            EvalEvery::EpochFraction(f) if !(f > 0.0 && f.is_finite()) => {
                return bad(format!("eval_every fraction must be positive, got {f}"))
            }
            EvalEvery::Steps(0) => return bad("eval_every steps must be positive".into()),
            _ => {}
        }
        if self.checkpoints_kept == 0 {
            return bad("checkpoints_kept must be at least 1".into());
        }
        self.loss_weights.validate()?;
        self.optimizer.validate().map_err(TrainError::Config)?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub path: PathBuf,
    pub step: usize,
    pub perplexity: f64,
    pub stage: Stage,
    pub config_hash: String,
}

impl CheckpointRecord {
    pub fn manifest_path(&self) -> PathBuf {
        manifest_path_for(&self.path)
    }

    /// Rebuilds the record of a checkpoint from the manifest beside it.
    pub fn from_checkpoint(path: &Path) -> Result<Self, TrainError> {
        let m = Manifest::load(&manifest_path_for(path))?;
        Ok(Self {
            path: path.to_owned(),
            step: m.step,
            perplexity: m.validation_perplexity,
            stage: m.stage,
            config_hash: m.config_hash,
        })
    }
}

pub(crate) fn manifest_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("manifest.json")
}

/// Provenance written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub step: usize,
    pub total_steps: usize,
    pub validation_perplexity: f64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub model_config: crate::model::ModelConfig,
    pub data_hashes: BTreeMap<String, String>,
    pub trainable: Vec<String>,
    pub active_language: Option<String>,
    pub parent_checkpoint: Option<PathBuf>,
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path)
            .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("workflow error: {0}")]
    Workflow(String),
    #[error("training diverged at step {step} (loss {loss}); diagnostics in {}", .diagnostic.display())]
    Divergence {
        step: usize,
        loss: f64,
        diagnostic: PathBuf,
    },
    #[error("freeze violation: frozen parameters changed: {0:?}")]
    FreezeViolation(Vec<String>),
    #[error("no checkpoint records to select from")]
    NoRecords,
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Lowest stored perplexity; ties go to the earlier step.
pub fn select_best_checkpoint(
    records: &[CheckpointRecord],
) -> Result<&CheckpointRecord, TrainError> {
    let mut best: Option<&CheckpointRecord> = None;
    for r in records {
        if best.map_or(true, |b| {
            better((r.perplexity, r.step), (b.perplexity, b.step))
        }) {
            best = Some(r);
        }
    }
    best.ok_or(TrainError::NoRecords)
}

/// Reloads every checkpoint, scores it on `corpus` and returns the best one
/// together with its perplexity there.
pub fn select_best_on_corpus(
    records: &[CheckpointRecord],
    tok: &Tokenizer,
    corpus: &Corpus,
    cfg: &ExampleConfig,
) -> Result<(CheckpointRecord, f64), TrainError> {
    let mut best: Option<(CheckpointRecord, f64)> = None;
    for r in records {
        let model = load_model(&r.path)?;
        let ppl = perplexity(&model, corpus, tok, cfg)?;
        if best
            .as_ref()
            .map_or(true, |(b, bp)| better((ppl, r.step), (*bp, b.step)))
        {
            best = Some((r.clone(), ppl));
        }
    }
    best.ok_or(TrainError::NoRecords)
}
