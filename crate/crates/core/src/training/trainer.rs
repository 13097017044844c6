use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::objective::{double_head_loss, lm_batch_loss};
use super::{
    manifest_path_for, AdamW, CheckpointRecord, Duration, EvalEvery, Manifest, Stage, TrainConfig,
    TrainError,
};
use crate::adapters::{AdapterKey, FreezePlan};
use crate::checkpoint::{read_archive, restore_parameters, save_model};
use crate::data::{
    build_lm_sequence, dialogue_examples, reply_sequences, Corpus, DataError, ExampleConfig,
    LmSequence, TextCorpus, TokenizedExample, Tokenizer,
};
use crate::eval::perplexity_of_sequences;
use crate::model::{changed_parameters, DropoutCtx, Grads, TransformerModel};

/// Dialogue corpora plus the settings needed to serialize them.
#[derive(Debug, Clone)]
pub struct DialogueData<'a> {
    pub tokenizer: &'a Tokenizer,
    pub examples: ExampleConfig,
    pub train: &'a Corpus,
    pub validation: &'a Corpus,
    /// Extra entries copied into every manifest.
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl<'a> DialogueData<'a> {
    pub fn new(
        tokenizer: &'a Tokenizer,
        examples: ExampleConfig,
        train: &'a Corpus,
        validation: &'a Corpus,
    ) -> Self {
        Self {
            tokenizer,
            examples,
            train,
            validation,
            provenance: BTreeMap::new(),
        }
    }
}

/// Monolingual text for causal-LM stages.
#[derive(Debug, Clone)]
pub struct TextData<'a> {
    pub tokenizer: &'a Tokenizer,
    pub max_len: usize,
    pub train: &'a TextCorpus,
    pub validation: &'a TextCorpus,
    pub provenance: BTreeMap<String, serde_json::Value>,
}

impl<'a> TextData<'a> {
    pub fn new(
        tokenizer: &'a Tokenizer,
        max_len: usize,
        train: &'a TextCorpus,
        validation: &'a TextCorpus,
    ) -> Self {
        Self {
            tokenizer,
            max_len,
            train,
            validation,
            provenance: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub lm_loss: f64,
    pub mc_loss: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub perplexity: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stage: Stage,
    pub total_steps: usize,
    /// Retained checkpoints, best (lowest perplexity, then earliest) first.
    pub records: Vec<CheckpointRecord>,
    /// The model as it stands after the last step.
    pub final_record: CheckpointRecord,
    pub initial_perplexity: f64,
    pub evals: Vec<EvalPoint>,
    pub steps: Vec<StepLog>,
    pub trainable: Vec<String>,
    pub changed: Vec<String>,
    /// Parameter digests when training started and when it ended.
    pub start_snapshot: BTreeMap<String, String>,
    pub end_snapshot: BTreeMap<String, String>,
}

impl TrainOutcome {
    pub fn best(&self) -> &CheckpointRecord {
        &self.records[0]
    }
}

enum TrainSet {
    Dialogue(Vec<TokenizedExample>),
    Text(Vec<LmSequence>),
}

impl TrainSet {
    fn len(&self) -> usize {
        match self {
            TrainSet::Dialogue(v) => v.len(),
            TrainSet::Text(v) => v.len(),
        }
    }
}

struct StageRun<'a> {
    stage: Stage,
    cfg: &'a TrainConfig,
    out_dir: &'a Path,
    plan: FreezePlan,
    train: TrainSet,
    validation: Vec<LmSequence>,
    data_hashes: BTreeMap<String, String>,
    provenance: BTreeMap<String, serde_json::Value>,
    parent: Option<PathBuf>,
}

fn sha(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io(format!("{}: {e}", path.display()))
}

/// Steps (1-based, counted after the update) at which validation runs.
fn eval_schedule(every: EvalEvery, steps_per_epoch: usize, total: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    match every {
        EvalEvery::EpochFraction(f) => {
            let span = f * steps_per_epoch as f64;
            let mut k = 1usize;
            loop {
                let s = ((k as f64 * span) - 1e-9).ceil().max(1.0) as usize;
                if s > total {
                    break;
                }
                out.insert(s);
                k += 1;
            }
        }
        EvalEvery::Steps(n) => out.extend((n..=total).step_by(n)),
    }
    out.insert(total);
    out
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(io(path))
}

struct Saver<'a> {
    run: &'a StageRun<'a>,
    total_steps: usize,
    trainable: &'a [String],
}

impl Saver<'_> {
    fn save(
        &self,
        model: &TransformerModel,
        path: PathBuf,
        step: usize,
        ppl: f64,
    ) -> Result<CheckpointRecord, TrainError> {
        let cfg = self.run.cfg;
        let hash = cfg.hash();
        save_model(
            model,
            &path,
            &[
                ("stage", self.run.stage.as_str().to_owned()),
                ("step", step.to_string()),
                ("validation_perplexity", ppl.to_string()),
                ("config_hash", hash.clone()),
            ],
        )?;
        let manifest = Manifest {
            stage: self.run.stage,
            step,
            total_steps: self.total_steps,
            validation_perplexity: ppl,
            config: cfg.clone(),
            config_hash: hash.clone(),
            seed: cfg.seed,
            model_config: model.config().clone(),
            data_hashes: self.run.data_hashes.clone(),
            trainable: self.trainable.to_vec(),
            active_language: model.active_language().map(str::to_owned),
            parent_checkpoint: self.run.parent.clone(),
            provenance: self.run.provenance.clone(),
        };
        write_json(&manifest_path_for(&path), &manifest)?;
        Ok(CheckpointRecord {
            path,
            step,
            perplexity: ppl,
            stage: self.run.stage,
            config_hash: hash,
        })
    }
}

fn remove_checkpoint(r: &CheckpointRecord) {
    for p in [r.path.clone(), r.manifest_path()] {
        if let Err(e) = fs::remove_file(&p) {
            log::warn!("could not remove evicted checkpoint {}: {e}", p.display());
        }
    }
}

fn run_stage(model: &mut TransformerModel, run: StageRun<'_>) -> Result<TrainOutcome, TrainError> {
    let cfg = run.cfg;
    cfg.validate()?;
    if cfg.stage != run.stage {
        return Err(TrainError::Config(format!(
            "config is for stage {}, but {} was requested",
            cfg.stage.as_str(),
            run.stage.as_str()
        )));
    }
    let n = run.train.len();
    if n == 0 {
        return Err(DataError::EmptyCorpus.into());
    }
    if run.validation.is_empty() {
        return Err(TrainError::Config("validation data is empty".into()));
    }
    fs::create_dir_all(run.out_dir).map_err(io(run.out_dir))?;
    model.set_trainable(&run.plan)?;
    let trainable = run.plan.trainable_set(model.params())?;

    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = match cfg.duration {
        Duration::Epochs(e) => e * steps_per_epoch,
        Duration::Steps(s) => s,
    };
    let eval_at = eval_schedule(cfg.eval_every, steps_per_epoch, total);
    let saver = Saver {
        run: &run,
        total_steps: total,
        trainable: &trainable,
    };

    let start_snapshot = model.params().snapshot();
    let initial_perplexity = perplexity_of_sequences(model, &run.validation)?;
    log::info!(
        "{}: {n} training items, {total} steps, initial validation perplexity {initial_perplexity:.4}",
        run.stage.as_str()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut steps = Vec::with_capacity(total);
    let mut evals = Vec::new();
    let mut records: Vec<CheckpointRecord> = Vec::new();
    let mut last_ppl = initial_perplexity;
    let p_drop = model.config().dropout;

    for step in 0..total {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + cfg.batch_size).min(n)];
        cursor += idx.len();
        let lr = cfg.schedule.lr_at(cfg.learning_rate, step, total);
        let mut grads = Grads::for_trainable(model.params());
        let dropout = Some(DropoutCtx {
            p: p_drop,
            rng: &mut rng,
        });
        let (loss, lm, mc) = match &run.train {
            TrainSet::Dialogue(items) => {
                let batch: Vec<&TokenizedExample> = idx.iter().map(|&i| &items[i]).collect();
                let l =
                    double_head_loss(model, &batch, cfg.loss_weights, dropout, Some(&mut grads))?;
                (l.total, l.lm.loss, Some(l.mc))
            }
            TrainSet::Text(seqs) => {
                let batch: Vec<&LmSequence> = idx.iter().map(|&i| &seqs[i]).collect();
                let l = lm_batch_loss(model, &batch, dropout, Some(&mut grads))?;
                (l.loss, l.loss, None)
            }
        };
        if !loss.is_finite() || !grads.all_finite() {
            let step = step + 1;
            let diagnostic = run.out_dir.join("divergence.json");
            write_json(
                &diagnostic,
                &serde_json::json!({
                    "stage": run.stage,
                    "step": step,
                    "lr": lr,
                    "loss": loss.to_string(),
                    "lm_loss": lm.to_string(),
                    "mc_loss": mc.map(|m| m.to_string()),
                    "gradients_finite": grads.all_finite(),
                    "config": cfg,
                }),
            )?;
            return Err(TrainError::Divergence {
                step,
                loss,
                diagnostic,
            });
        }
        let grad_norm = opt.clip(&mut grads);
        opt.update(model.params_mut(), &grads, lr);
        log::debug!(
            "{} step {}: loss {loss:.5} lm {lm:.5} mc {} lr {lr:.3e} |g| {grad_norm:.4}",
            run.stage.as_str(),
            step + 1,
            mc.map_or("-".into(), |m| format!("{m:.5}"))
        );
        steps.push(StepLog {
            step: step + 1,
            lr,
            loss,
            lm_loss: lm,
            mc_loss: mc,
            grad_norm,
        });

        let done = step + 1;
        if eval_at.contains(&done) {
            let ppl = perplexity_of_sequences(model, &run.validation)?;
            last_ppl = ppl;
            evals.push(EvalPoint {
                step: done,
                perplexity: ppl,
            });
            log::info!(
                "{} step {done}/{total}: validation perplexity {ppl:.4}",
                run.stage.as_str()
            );
            let worst = records
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| {
                    a.perplexity
                        .total_cmp(&b.perplexity)
                        .then(a.step.cmp(&b.step))
                })
                .map(|(i, r)| (i, r.perplexity));
            let keep = records.len() < cfg.checkpoints_kept || worst.map_or(true, |(_, w)| ppl < w);
            if keep {
                let path = run
                    .out_dir
                    .join(format!("checkpoint-{done:07}.safetensors"));
                records.push(saver.save(model, path, done, ppl)?);
                if records.len() > cfg.checkpoints_kept {
                    if let Some((i, _)) = worst {
                        remove_checkpoint(&records.remove(i));
                    }
                }
            }
        }
    }

    let final_record = saver.save(
        model,
        run.out_dir.join("final.safetensors"),
        total,
        last_ppl,
    )?;
    records.sort_by(|a, b| {
        a.perplexity
            .total_cmp(&b.perplexity)
            .then(a.step.cmp(&b.step))
    });

    let end_snapshot = model.params().snapshot();
    let changed = changed_parameters(&start_snapshot, &end_snapshot);
    let unexpected: Vec<String> = changed
        .iter()
        .filter(|c| trainable.binary_search(c).is_err())
        .cloned()
        .collect();
    if !unexpected.is_empty() {
        return Err(TrainError::FreezeViolation(unexpected));
    }
    let untouched = trainable.len() - changed.len();
    if untouched > 0 {
        log::warn!(
            "{}: {untouched} trainable tensors did not change",
            run.stage.as_str()
        );
    }
    Ok(TrainOutcome {
        stage: run.stage,
        total_steps: total,
        records,
        final_record,
        initial_perplexity,
        evals,
        steps,
        trainable,
        changed,
        start_snapshot,
        end_snapshot,
    })
}

fn dialogue_run<'a>(
    stage: Stage,
    data: &DialogueData<'_>,
    cfg: &'a TrainConfig,
    out_dir: &'a Path,
    plan: FreezePlan,
    parent: Option<PathBuf>,
) -> Result<StageRun<'a>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let items = dialogue_examples(data.train, data.tokenizer, &data.examples, &mut rng)?;
    let validation = reply_sequences(data.validation, data.tokenizer, &data.examples)?;
    let data_hashes = BTreeMap::from([
        ("train".to_owned(), data.train.content_hash()),
        ("validation".to_owned(), data.validation.content_hash()),
        ("tokenizer".to_owned(), sha(&data.tokenizer.to_json())),
        (
            "examples".to_owned(),
            sha(&serde_json::to_string(&data.examples).expect("serializes")),
        ),
    ]);
    Ok(StageRun {
        stage,
        cfg,
        out_dir,
        plan,
        train: TrainSet::Dialogue(items),
        validation,
        data_hashes,
        provenance: data.provenance.clone(),
        parent,
    })
}

fn text_run<'a>(
    stage: Stage,
    data: &TextData<'_>,
    cfg: &'a TrainConfig,
    out_dir: &'a Path,
    plan: FreezePlan,
) -> Result<StageRun<'a>, TrainError> {
    let encode = |c: &TextCorpus| -> Result<Vec<LmSequence>, DataError> {
        c.lines
            .iter()
            .map(|l| build_lm_sequence(l, data.tokenizer, data.max_len))
            .collect()
    };
    let data_hashes = BTreeMap::from([
        ("train".to_owned(), data.train.content_hash()),
        ("validation".to_owned(), data.validation.content_hash()),
        ("tokenizer".to_owned(), sha(&data.tokenizer.to_json())),
    ]);
    Ok(StageRun {
        stage,
        cfg,
        out_dir,
        plan,
        train: TrainSet::Text(encode(data.train)?),
        validation: encode(data.validation)?,
        data_hashes,
        provenance: data.provenance.clone(),
        parent: None,
    })
}

/// Plain double-head fine-tuning of every parameter.
pub fn finetune_double_head(
    model: &mut TransformerModel,
    data: &DialogueData<'_>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let run = dialogue_run(
        Stage::Finetune,
        data,
        cfg,
        out_dir,
        FreezePlan::everything(),
        None,
    )?;
    run_stage(model, run)
}

/// Causal-LM training of the backbone on plain text; heads.mc and adapters stay frozen.
pub fn pretrain_language_model(
    model: &mut TransformerModel,
    data: &TextData<'_>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let plan = FreezePlan::backbone_language_model(model);
    let run = text_run(Stage::Pretrain, data, cfg, out_dir, plan)?;
    run_stage(model, run)
}

/// Trains the `lang` language adapters on causal LM; everything else is frozen.
pub fn train_language_adapter(
    model: &mut TransformerModel,
    data: &TextData<'_>,
    lang: &str,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    if !model.adapter_bank().contains(&AdapterKey::language(lang)) {
        return Err(TrainError::Workflow(format!(
            "no language adapters attached for {lang:?}"
        )));
    }
    if data.train.language != lang || data.validation.language != lang {
        return Err(TrainError::Workflow(format!(
            "text is tagged {:?}/{:?} but the adapter is for {lang:?}",
            data.train.language, data.validation.language
        )));
    }
    model.set_active_language(lang)?;
    let run = text_run(
        Stage::LangAdapter,
        data,
        cfg,
        out_dir,
        FreezePlan::language_adapter(lang),
    )?;
    run_stage(model, run)
}

fn check_task_setup(model: &TransformerModel, corpus: &Corpus) -> Result<(), TrainError> {
    if !model.adapter_bank().contains(&AdapterKey::task()) {
        return Err(TrainError::Workflow("no task adapters attached".into()));
    }
    match model.active_language() {
        Some(l) if l == corpus.language => Ok(()),
        other => Err(TrainError::Workflow(format!(
            "active language adapters are {other:?} but the corpus is {:?}",
            corpus.language
        ))),
    }
}

/// First cross-lingual stage: task adapters on source-language dialogues,
/// with the source language adapters active and frozen.
pub fn train_task_adapter_source(
    model: &mut TransformerModel,
    data: &DialogueData<'_>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    check_task_setup(model, data.train)?;
    let run = dialogue_run(
        Stage::TaskAdapterSrc,
        data,
        cfg,
        out_dir,
        FreezePlan::task_adapters(),
        None,
    )?;
    run_stage(model, run)
}

/// Second cross-lingual stage: the task adapters from `stage1` are restored
/// and re-tuned on target-language dialogues behind the target language
/// adapters.
pub fn adapt_task_adapter_target(
    model: &mut TransformerModel,
    data: &DialogueData<'_>,
    stage1: Option<&CheckpointRecord>,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    let stage1 = stage1.ok_or_else(|| {
        TrainError::Workflow(
            "target adaptation needs the checkpoint of the source task-adapter stage".into(),
        )
    })?;
    if stage1.stage != Stage::TaskAdapterSrc {
        return Err(TrainError::Workflow(format!(
            "expected a {} checkpoint, got {}",
            Stage::TaskAdapterSrc.as_str(),
            stage1.stage.as_str()
        )));
    }
    check_task_setup(model, data.train)?;
    let archive = read_archive(&stage1.path)?;
    let prefix = format!("{}.", AdapterKey::task().prefix());
    restore_parameters(model, &archive, &prefix)?;
    let run = dialogue_run(
        Stage::TaskAdapterTgt,
        data,
        cfg,
        out_dir,
        FreezePlan::task_adapters(),
        Some(stage1.path.clone()),
    )?;
    run_stage(model, run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_epoch_schedule() {
        let s = eval_schedule(EvalEvery::EpochFraction(0.25), 8, 40);
        assert_eq!(s.len(), 20);
        assert_eq!(s.iter().next(), Some(&2));
        assert_eq!(s.iter().last(), Some(&40));
        let s = eval_schedule(EvalEvery::EpochFraction(0.25), 6, 6);
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec![2, 3, 5, 6]);
        let s = eval_schedule(EvalEvery::Steps(300), 1, 1000);
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec![300, 600, 900, 1000]);
    }
}
