mod common;

use std::fs;

use dialport_core::adapters::{AdapterKey, AdapterSpec};
use dialport_core::checkpoint::load_model;
use dialport_core::data::ExampleConfig;
use dialport_core::training::*;

use common::*;

fn short(mut cfg: TrainConfig, steps: usize) -> TrainConfig {
    cfg.duration = Duration::Steps(steps);
    cfg.eval_every = EvalEvery::Steps(2);
    cfg.batch_size = 2;
    cfg.learning_rate = 1e-3;
    cfg
}

#[test]
fn finetune_keeps_best_checkpoints_with_manifests() {
    let (train, valid) = corpora("en", 4);
    let tok = tokenizer(&train);
    let mut model = tiny_model(&tok);
    let data = DialogueData::new(&tok, ExampleConfig::new(256), &train, &valid);
    let mut cfg = short(TrainConfig::finetune(), 6);
    cfg.checkpoints_kept = 2;
    let dir = tempfile::tempdir().unwrap();
    let out = finetune_double_head(&mut model, &data, &cfg, dir.path()).unwrap();

    assert_eq!(out.total_steps, 6);
    assert_eq!(
        out.evals.iter().map(|e| e.step).collect::<Vec<_>>(),
        vec![2, 4, 6]
    );
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.best(), select_best_checkpoint(&out.records).unwrap());
    let kept: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().into_string().unwrap())
        .filter(|n| n.starts_with("checkpoint-") && n.ends_with(".safetensors"))
        .collect();
    assert_eq!(kept.len(), 2, "{kept:?}");
    for r in &out.records {
        let m = Manifest::load(&r.manifest_path()).unwrap();
        assert_eq!(m.step, r.step);
        assert_eq!(m.config_hash, cfg.hash());
        assert_eq!(m.stage, Stage::Finetune);
        assert!(m.data_hashes.values().any(|h| *h == train.content_hash()));
    }
    assert!(out.final_record.path.ends_with("final.safetensors"));
    let reloaded = load_model(&out.final_record.path).unwrap();
    assert_eq!(reloaded.params().snapshot(), model.params().snapshot());
    assert_eq!(out.changed, out.trainable);
    let from_disk = CheckpointRecord::from_checkpoint(&out.final_record.path).unwrap();
    assert_eq!(from_disk.step, 6);
}

#[test]
fn training_is_reproducible() {
    let (train, valid) = corpora("en", 3);
    let tok = tokenizer(&train);
    let data = DialogueData::new(&tok, ExampleConfig::new(256), &train, &valid);
    let cfg = short(TrainConfig::finetune(), 3);
    let run = || {
        let mut model = tiny_model(&tok);
        let dir = tempfile::tempdir().unwrap();
        finetune_double_head(&mut model, &data, &cfg, dir.path()).unwrap();
        model.params().snapshot()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_stops_with_a_diagnostic() {
    let (train, valid) = corpora("en", 3);
    let tok = tokenizer(&train);
    let mut model = tiny_model(&tok);
    let id = model.params().iter().next().unwrap().0;
    model.params_mut().get_mut(id).data.fill(f64::NAN);
    let data = DialogueData::new(&tok, ExampleConfig::new(256), &train, &valid);
    let dir = tempfile::tempdir().unwrap();
    let err = finetune_double_head(
        &mut model,
        &data,
        &short(TrainConfig::finetune(), 3),
        dir.path(),
    )
    .unwrap_err();
    match err {
        TrainError::Divergence {
            step, diagnostic, ..
        } => {
            assert_eq!(step, 1);
            assert!(diagnostic.exists());
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let (train, valid) = corpora("en", 2);
    let tok = tokenizer(&train);
    let mut model = tiny_model(&tok);
    let data = DialogueData::new(&tok, ExampleConfig::new(256), &train, &valid);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = short(TrainConfig::finetune(), 2);
    cfg.batch_size = 0;
    assert!(matches!(
        finetune_double_head(&mut model, &data, &cfg, dir.path()),
        Err(TrainError::Config(_))
    ));
    let mut cfg = short(TrainConfig::finetune(), 2);
    cfg.stage = Stage::LangAdapter;
    assert!(finetune_double_head(&mut model, &data, &cfg, dir.path()).is_err());
}

#[test]
fn each_stage_changes_exactly_its_trainable_set() {
    let (train, valid) = corpora("en", 3);
    let tok = tokenizer(&train);
    let text_train = text("en", 20, 1);
    let text_valid = text("en", 5, 2);
    let dir = tempfile::tempdir().unwrap();

    let mut model = tiny_model(&tok);
    let td = TextData::new(&tok, 64, &text_train, &text_valid);
    let pre = pretrain_language_model(
        &mut model,
        &td,
        &short(TrainConfig::pretrain(), 3),
        &dir.path().join("p"),
    )
    .unwrap();
    assert_eq!(pre.changed, pre.trainable);
    assert!(!pre.trainable.iter().any(|n| n.starts_with("heads.mc")));

    let d = model.config().d_model;
    model
        .attach_adapters(&[
            AdapterSpec::language_default("en", d),
            AdapterSpec::task_default(d),
        ])
        .unwrap();
    let la = train_language_adapter(
        &mut model,
        &td,
        "en",
        &short(TrainConfig::lang_adapter(), 3),
        &dir.path().join("l"),
    )
    .unwrap();
    assert_eq!(la.changed, la.trainable);
    assert!(la
        .trainable
        .iter()
        .all(|n| n.starts_with("adapters.lang.en.")));

    let data = DialogueData::new(&tok, ExampleConfig::new(256), &train, &valid);
    let ta = train_task_adapter_source(
        &mut model,
        &data,
        &short(TrainConfig::task_adapter(Stage::TaskAdapterSrc), 3),
        &dir.path().join("t"),
    )
    .unwrap();
    assert_eq!(ta.changed, ta.trainable);
    assert!(ta
        .trainable
        .iter()
        .all(|n| n.starts_with(&AdapterKey::task().prefix())));
}

#[test]
fn stage_two_requires_a_stage_one_record() {
    let (train, valid) = corpora("en", 2);
    let tok = tokenizer(&train);
    let mut model = tiny_model(&tok);
    let d = model.config().d_model;
    model
        .attach_adapters(&[
            AdapterSpec::language_default("en", d),
            AdapterSpec::task_default(d),
        ])
        .unwrap();
    let data = DialogueData::new(&tok, ExampleConfig::new(256), &train, &valid);
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(TrainConfig::task_adapter(Stage::TaskAdapterTgt), 2);
    assert!(matches!(
        adapt_task_adapter_target(&mut model, &data, None, &cfg, dir.path()),
        Err(TrainError::Workflow(_))
    ));
    let wrong = CheckpointRecord {
        path: dir.path().join("x.safetensors"),
        step: 1,
        perplexity: 1.0,
        stage: Stage::Finetune,
        config_hash: String::new(),
    };
    assert!(matches!(
        adapt_task_adapter_target(&mut model, &data, Some(&wrong), &cfg, dir.path()),
        Err(TrainError::Workflow(_))
    ));
}

#[test]
fn task_stage_needs_matching_active_language() {
    let (train, valid) = corpora("en", 2);
    let tok = tokenizer(&train);
    let mut model = tiny_model(&tok);
    let d = model.config().d_model;
    model
        .attach_adapters(&[
            AdapterSpec::language_default("fr", d),
            AdapterSpec::task_default(d),
        ])
        .unwrap();
    let data = DialogueData::new(&tok, ExampleConfig::new(256), &train, &valid);
    let dir = tempfile::tempdir().unwrap();
    let cfg = short(TrainConfig::task_adapter(Stage::TaskAdapterSrc), 2);
    assert!(matches!(
        train_task_adapter_source(&mut model, &data, &cfg, dir.path()),
        Err(TrainError::Workflow(_))
    ));
}
