use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::adapters::{AdapterKey, AdapterSpec};
use crate::data::{
    translate_corpus, Corpus, DroppedDialogue, ExampleConfig, Tokenizer, TranslationClient,
};
use crate::model::TransformerModel;
use crate::training::{
    adapt_task_adapter_target, finetune_double_head, train_task_adapter_source, CheckpointRecord,
    DialogueData, Stage, TrainConfig, TrainError, TrainOutcome,
};

#[derive(Debug, Clone)]
pub struct TrainOnTargetOutcome {
    pub train_path: PathBuf,
    pub validation_path: PathBuf,
    pub dropped_train: Vec<DroppedDialogue>,
    pub dropped_validation: Vec<DroppedDialogue>,
    pub training: TrainOutcome,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io(format!("{}: {e}", path.display()))
}

/// Machine-translates the source corpora into the target language, stores
/// them under `out_dir/data` and fine-tunes `model` on the result.
#[allow(clippy::too_many_arguments)]
pub fn run_train_on_target(
    model: &mut TransformerModel,
    tokenizer: &Tokenizer,
    examples: ExampleConfig,
    source_train: &Corpus,
    source_validation: &Corpus,
    client: &dyn TranslationClient,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOnTargetOutcome, TrainError> {
    if cfg.stage != Stage::Finetune {
        return Err(TrainError::Config(format!(
            "train-on-target fine-tunes the whole model; got stage {}",
            cfg.stage.as_str()
        )));
    }
    let train = translate_corpus(source_train, client)?;
    let validation = translate_corpus(source_validation, client)?;
    let data_dir = out_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| io_err(&data_dir, e))?;
    let train_path = data_dir.join(format!("train.{}.json", client.target()));
    let validation_path = data_dir.join(format!("validation.{}.json", client.target()));
    train.corpus.save(&train_path)?;
    validation.corpus.save(&validation_path)?;
    let dropped_path = data_dir.join("dropped.json");
    let dropped = json!({"train": train.dropped, "validation": validation.dropped});
    fs::write(
        &dropped_path,
        serde_json::to_string_pretty(&dropped).expect("json"),
    )
    .map_err(|e| io_err(&dropped_path, e))?;

    let mut data = DialogueData::new(tokenizer, examples, &train.corpus, &validation.corpus);
    data.provenance.insert(
        "translation".into(),
        json!({
            "source": client.source(),
            "target": client.target(),
            "source_train_sha256": source_train.content_hash(),
            "source_validation_sha256": source_validation.content_hash(),
            "dropped_train": train.dropped.len(),
            "dropped_validation": validation.dropped.len(),
        }),
    );
    let training = finetune_double_head(model, &data, cfg, &out_dir.join("finetune"))?;
    Ok(TrainOnTargetOutcome {
        train_path,
        validation_path,
        dropped_train: train.dropped,
        dropped_validation: validation.dropped,
        training,
    })
}

/// Inputs of the two-stage cross-lingual adapter pipeline.
#[derive(Debug, Clone)]
pub struct CrossLingualInputs<'a> {
    pub tokenizer: &'a Tokenizer,
    pub examples: ExampleConfig,
    pub source_train: &'a Corpus,
    pub source_validation: &'a Corpus,
    pub target_train: &'a Corpus,
    pub target_validation: &'a Corpus,
    /// Pretrained language-adapter archives by language.
    pub lang_adapters: BTreeMap<String, PathBuf>,
    /// Task-adapter bottleneck; the default reduction factor when absent.
    pub task_bottleneck: Option<usize>,
    /// Use only the first `n` target training dialogues.
    pub few_shot: Option<usize>,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct CrossLingualOutcome {
    pub stage1: TrainOutcome,
    pub stage2: TrainOutcome,
}

impl CrossLingualOutcome {
    pub fn stage1_final(&self) -> &CheckpointRecord {
        &self.stage1.final_record
    }
}

/// Stage 1 trains task adapters on source dialogues behind the source
/// language adapters; stage 2 continues them on target dialogues behind the
/// target language adapters. Checkpoints go to `out_dir/stage1` and
/// `out_dir/stage2`.
pub fn run_cross_lingual(
    model: &mut TransformerModel,
    inputs: &CrossLingualInputs<'_>,
    out_dir: &Path,
) -> Result<CrossLingualOutcome, TrainError> {
    let src = inputs.source_train.language.clone();
    let tgt = inputs.target_train.language.clone();
    if inputs.source_validation.language != src || inputs.target_validation.language != tgt {
        return Err(TrainError::Workflow(
            "validation corpora must match their training languages".into(),
        ));
    }
    if src == tgt {
        return Err(TrainError::Workflow(format!(
            "source and target are both {src:?}"
        )));
    }
    if inputs.stage1.stage != Stage::TaskAdapterSrc || inputs.stage2.stage != Stage::TaskAdapterTgt
    {
        return Err(TrainError::Config(
            "stage configs must be task_adapter_src and task_adapter_tgt".into(),
        ));
    }
    let mut adapter_files = Vec::new();
    for lang in [&src, &tgt] {
        let path = inputs.lang_adapters.get(lang).ok_or_else(|| {
            TrainError::Workflow(format!("no language-adapter checkpoint given for {lang:?}"))
        })?;
        if !path.is_file() {
            return Err(TrainError::Workflow(format!(
                "language-adapter checkpoint for {lang:?} not found at {}",
                path.display()
            )));
        }
        adapter_files.push((lang.clone(), path.clone()));
    }
    inputs.stage1.validate()?;
    inputs.stage2.validate()?;

    for (lang, path) in &adapter_files {
        let key = model.load_adapters(path)?;
        if key != AdapterKey::language(lang.as_str()) {
            return Err(TrainError::Workflow(format!(
                "{} holds {} adapters, expected language adapters for {lang:?}",
                path.display(),
                key.prefix()
            )));
        }
    }
    if !model.adapter_bank().contains(&AdapterKey::task()) {
        let d = model.config().d_model;
        let spec = match inputs.task_bottleneck {
            Some(b) => AdapterSpec::task(b),
            None => AdapterSpec::task_default(d),
        };
        model.attach_adapters(&[spec])?;
    }

    model.set_active_language(&src)?;
    let data1 = DialogueData::new(
        inputs.tokenizer,
        inputs.examples,
        inputs.source_train,
        inputs.source_validation,
    );
    let stage1 = train_task_adapter_source(model, &data1, &inputs.stage1, &out_dir.join("stage1"))?;

    model.set_active_language(&tgt)?;
    let few;
    let target_train = match inputs.few_shot {
        Some(n) => {
            few = inputs.target_train.take(n);
            &few
        }
        None => inputs.target_train,
    };
    let mut data2 = DialogueData::new(
        inputs.tokenizer,
        inputs.examples,
        target_train,
        inputs.target_validation,
    );
    if let Some(n) = inputs.few_shot {
        data2
            .provenance
            .insert("few_shot_dialogues".into(), json!(n));
    }
    let stage2 = adapt_task_adapter_target(
        model,
        &data2,
        Some(&stage1.final_record),
        &inputs.stage2,
        &out_dir.join("stage2"),
    )?;
    Ok(CrossLingualOutcome { stage1, stage2 })
}
