//! The `dialport` command line: training pipelines, evaluation, agreement
//! statistics, the chat service and a terminal chat loop.

mod args;
mod error;

use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use dialport_core::adapters::{AdapterKey, AdapterSpec};
use dialport_core::checkpoint::{file_sha256, load_model};
use dialport_core::data::{
    client_from_spec, translate_corpus, Corpus, ExampleConfig, TextCorpus, Tokenizer,
};
use dialport_core::eval::{evaluate_model, fleiss_kappa, EvalConfig, RatingsMatrix};
use dialport_core::model::TransformerModel;
use dialport_core::strategy::run_train_on_target;
use dialport_core::strategy::{ChatState, StrategyConfig};
use dialport_core::training::{
    adapt_task_adapter_target, finetune_double_head, pretrain_language_model,
    train_language_adapter, train_task_adapter_source, CheckpointRecord, DialogueData, Stage,
    TextData, TrainConfig, TrainOutcome,
};
use dialport_service::{router, AppState, ModelPool, PoolManifest, ServiceConfig};
use serde_json::{json, Value};

pub use args::*;
pub use error::{CliError, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_FAILURE};

/// Runs one command. Summaries go to `out`; `input` feeds the chat loop.
pub fn run(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    let summary = match cli.command {
        Command::TrainTokenizer(a) => train_tokenizer(&a)?,
        Command::TranslateCorpus(a) => translate(&a)?,
        Command::Train(a) => train(&a)?,
        Command::TrainLangAdapter(a) => lang_adapter(&a)?,
        Command::TrainTaskAdapter(a) => task_adapter(&a)?,
        Command::AdaptTarget(a) => adapt_target(&a)?,
        Command::Evaluate(a) => evaluate(&a)?,
        Command::Kappa(a) => kappa(&a)?,
        Command::Serve(a) => return serve(&a),
        Command::Chat(a) => return chat(&a, input, out),
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&summary).expect("json")
    )
    .map_err(|e| CliError::other(format!("stdout: {e}")))
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(
        path,
        serde_json::to_string_pretty(value).expect("json") + "\n",
    )
    .map_err(|e| io_error(path, e))
}

fn train_tokenizer(a: &TrainTokenizerArgs) -> Result<Value, CliError> {
    let mut texts: Vec<String> = Vec::new();
    for path in &a.inputs {
        if path.extension().is_some_and(|e| e == "json") {
            texts.extend(Corpus::load(path)?.texts().map(str::to_owned));
        } else {
            texts.extend(TextCorpus::load(path, "und")?.lines);
        }
    }
    let tok = Tokenizer::train(texts.iter().map(String::as_str), a.vocab_size)?;
    tok.save(&a.out)?;
    Ok(json!({
        "tokenizer": a.out,
        "vocab_size": tok.vocab_size(),
        "documents": texts.len(),
    }))
}

fn translate(a: &TranslateCorpusArgs) -> Result<Value, CliError> {
    let corpus = Corpus::load(&a.input)?;
    let client = client_from_spec(&a.client)?;
    let result = translate_corpus(&corpus, client.as_ref())?;
    result.corpus.save(&a.output)?;
    let dropped_path = a
        .dropped
        .clone()
        .unwrap_or_else(|| a.output.with_extension("dropped.json"));
    write_json(&dropped_path, &json!(result.dropped))?;
    Ok(json!({
        "output": a.output,
        "language": result.corpus.language,
        "dialogues": result.corpus.num_dialogues(),
        "dropped": result.dropped.len(),
        "dropped_log": dropped_path,
    }))
}

fn record_json(r: &CheckpointRecord) -> Value {
    json!({"path": r.path, "step": r.step, "perplexity": r.perplexity})
}

fn outcome_json(o: &TrainOutcome) -> Value {
    json!({
        "stage": o.stage.as_str(),
        "total_steps": o.total_steps,
        "initial_perplexity": o.initial_perplexity,
        "best": record_json(o.best()),
        "final": record_json(&o.final_record),
        "trainable_tensors": o.trainable.len(),
        "changed_tensors": o.changed.len(),
    })
}

/// Writes `run.json` into the run directory and returns the summary.
fn finish_run(out_dir: &Path, command: &str, mut summary: Value) -> Result<Value, CliError> {
    summary["command"] = json!(command);
    write_json(&out_dir.join("run.json"), &summary)?;
    Ok(summary)
}

fn check_vocab(model: &TransformerModel, tok: &Tokenizer) -> Result<(), CliError> {
    if tok.vocab_size() > model.config().vocab_size {
        return Err(CliError::config(format!(
            "tokenizer has {} tokens but the model only {}",
            tok.vocab_size(),
            model.config().vocab_size
        )));
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<Value, CliError> {
    let tok = Tokenizer::load(&a.data.tokenizer)?;
    let mut model = match &a.init {
        Some(path) => load_model(path)?,
        None => TransformerModel::new(a.model.config(tok.vocab_size()))?,
    };
    check_vocab(&model, &tok)?;
    let max_len = a.data.max_len.unwrap_or(model.config().max_seq_len);
    let out = &a.data.out_dir;
    let summary = match a.stage {
        TrainStage::Pretrain => {
            if a.translate_with.is_some() {
                return Err(CliError::config(
                    "--translate-with applies to dialogue fine-tuning only",
                ));
            }
            let cfg = a.train.apply(TrainConfig::pretrain());
            let train = TextCorpus::load(&a.data.train, &a.lang)?;
            let validation = TextCorpus::load(&a.data.validation, &a.lang)?;
            let data = TextData::new(&tok, max_len, &train, &validation);
            outcome_json(&pretrain_language_model(&mut model, &data, &cfg, out)?)
        }
        TrainStage::Finetune => {
            let cfg = a.train.apply(TrainConfig::finetune());
            let train = Corpus::load(&a.data.train)?;
            let validation = Corpus::load(&a.data.validation)?;
            let examples = ExampleConfig::new(max_len);
            match &a.translate_with {
                Some(spec) => {
                    let client = client_from_spec(spec)?;
                    let o = run_train_on_target(
                        &mut model,
                        &tok,
                        examples,
                        &train,
                        &validation,
                        client.as_ref(),
                        &cfg,
                        out,
                    )?;
                    let mut s = outcome_json(&o.training);
                    s["translated_train"] = json!(o.train_path);
                    s["translated_validation"] = json!(o.validation_path);
                    s["dropped_train"] = json!(o.dropped_train.len());
                    s["dropped_validation"] = json!(o.dropped_validation.len());
                    s
                }
                None => {
                    let data = DialogueData::new(&tok, examples, &train, &validation);
                    outcome_json(&finetune_double_head(&mut model, &data, &cfg, out)?)
                }
            }
        }
    };
    finish_run(out, "train", summary)
}

fn lang_adapter(a: &LangAdapterArgs) -> Result<Value, CliError> {
    let tok = Tokenizer::load(&a.data.tokenizer)?;
    let mut model = load_model(&a.base)?;
    check_vocab(&model, &tok)?;
    let key = AdapterKey::language(&a.lang);
    if !model.adapter_bank().contains(&key) {
        let d = model.config().d_model;
        let spec = match a.bottleneck {
            Some(b) => AdapterSpec::language(&a.lang, b),
            None => AdapterSpec::language_default(&a.lang, d),
        };
        model.attach_adapters(&[spec])?;
    }
    let max_len = a.data.max_len.unwrap_or(model.config().max_seq_len);
    let train = TextCorpus::load(&a.data.train, &a.lang)?;
    let validation = TextCorpus::load(&a.data.validation, &a.lang)?;
    let data = TextData::new(&tok, max_len, &train, &validation);
    let cfg = a.train.apply(TrainConfig::lang_adapter());
    let outcome = train_language_adapter(&mut model, &data, &a.lang, &cfg, &a.data.out_dir)?;
    // The archive holds the adapters of the best checkpoint.
    let best = load_model(&outcome.best().path)?;
    let adapter_path = a
        .data
        .out_dir
        .join(format!("lang_adapter.{}.safetensors", a.lang));
    best.save_adapters(&key, &adapter_path)?;
    let mut summary = outcome_json(&outcome);
    summary["adapter"] = json!(adapter_path);
    finish_run(&a.data.out_dir, "train-lang-adapter", summary)
}

fn attach_task(model: &mut TransformerModel, bottleneck: Option<usize>) -> Result<(), CliError> {
    if !model.adapter_bank().contains(&AdapterKey::task()) {
        let spec = match bottleneck {
            Some(b) => AdapterSpec::task(b),
            None => AdapterSpec::task_default(model.config().d_model),
        };
        model.attach_adapters(&[spec])?;
    }
    Ok(())
}

fn load_language(model: &mut TransformerModel, path: &Path) -> Result<String, CliError> {
    let key = model.load_adapters(path)?;
    let lang = key
        .lang
        .ok_or_else(|| CliError::config(format!("{} is not a language adapter", path.display())))?;
    model.set_active_language(&lang)?;
    Ok(lang)
}

fn task_adapter(a: &TaskAdapterArgs) -> Result<Value, CliError> {
    let tok = Tokenizer::load(&a.data.tokenizer)?;
    let mut model = load_model(&a.base)?;
    check_vocab(&model, &tok)?;
    let lang = load_language(&mut model, &a.lang_adapter)?;
    attach_task(&mut model, a.bottleneck)?;
    let max_len = a.data.max_len.unwrap_or(model.config().max_seq_len);
    let train = Corpus::load(&a.data.train)?;
    let validation = Corpus::load(&a.data.validation)?;
    let data = DialogueData::new(&tok, ExampleConfig::new(max_len), &train, &validation);
    let cfg = a
        .train
        .apply(TrainConfig::task_adapter(Stage::TaskAdapterSrc));
    let outcome = train_task_adapter_source(&mut model, &data, &cfg, &a.data.out_dir)?;
    let mut summary = outcome_json(&outcome);
    summary["language"] = json!(lang);
    finish_run(&a.data.out_dir, "train-task-adapter", summary)
}

fn adapt_target(a: &AdaptTargetArgs) -> Result<Value, CliError> {
    let tok = Tokenizer::load(&a.data.tokenizer)?;
    let record = CheckpointRecord::from_checkpoint(&a.stage1)?;
    let mut model = load_model(&a.stage1)?;
    check_vocab(&model, &tok)?;
    let lang = load_language(&mut model, &a.lang_adapter)?;
    let max_len = a.data.max_len.unwrap_or(model.config().max_seq_len);
    let full = Corpus::load(&a.data.train)?;
    let train = match a.few_shot {
        Some(0) => return Err(CliError::config("--few-shot must be positive")),
        Some(n) => full.take(n),
        None => full,
    };
    let validation = Corpus::load(&a.data.validation)?;
    let mut data = DialogueData::new(&tok, ExampleConfig::new(max_len), &train, &validation);
    if let Some(n) = a.few_shot {
        data.provenance.insert(
            "few_shot_dialogues".into(),
            json!(train.num_dialogues().min(n)),
        );
    }
    let cfg = a
        .train
        .apply(TrainConfig::task_adapter(Stage::TaskAdapterTgt));
    let outcome =
        adapt_task_adapter_target(&mut model, &data, Some(&record), &cfg, &a.data.out_dir)?;
    let mut summary = outcome_json(&outcome);
    summary["language"] = json!(lang);
    summary["stage1"] = json!(a.stage1);
    finish_run(&a.data.out_dir, "adapt-target", summary)
}

fn evaluate(a: &EvaluateArgs) -> Result<Value, CliError> {
    let tok = Tokenizer::load(&a.tokenizer)?;
    let mut model = load_model(&a.checkpoint)?;
    check_vocab(&model, &tok)?;
    for path in &a.lang_adapters {
        model.load_adapters(path)?;
    }
    if let Some(lang) = &a.active_lang {
        model.set_active_language(lang)?;
    }
    let corpus = Corpus::load(&a.test)?;
    let mut cfg = EvalConfig::new(a.max_len.unwrap_or(model.config().max_seq_len));
    cfg.max_new_tokens = a.max_new_tokens;
    cfg.seed = a.seed;
    cfg.model_id = a.model_id.clone();
    cfg.strategy = a.strategy.clone();
    let mut report = evaluate_model(&model, &tok, &corpus, &cfg)?;
    report
        .provenance
        .insert("checkpoint".into(), a.checkpoint.display().to_string());
    report
        .provenance
        .insert("checkpoint_sha256".into(), file_sha256(&a.checkpoint)?);
    if let Some(lang) = model.active_language() {
        report
            .provenance
            .insert("active_language".into(), lang.to_owned());
    }
    let value = serde_json::to_value(&report).expect("report serializes");
    if let Some(path) = &a.out {
        write_json(path, &value)?;
    }
    Ok(value)
}

/// Parses a table of non-negative integers; `#` starts a comment.
fn read_table(path: &Path) -> Result<Vec<Vec<u64>>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c == '\t' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| {
                f.parse::<u64>().map_err(|_| {
                    CliError::data(format!("{}:{}: bad number {f:?}", path.display(), i + 1))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn kappa(a: &KappaArgs) -> Result<Value, CliError> {
    let matrix = match (&a.counts, &a.labels, a.categories) {
        (Some(path), _, _) => {
            let rows = read_table(path)?
                .into_iter()
                .map(|r| {
                    r.into_iter()
                        .map(|v| u32::try_from(v).map_err(|_| CliError::data("count too large")))
                        .collect::<Result<Vec<_>, _>>()
                })
                .collect::<Result<Vec<_>, _>>()?;
            RatingsMatrix::new(rows)?
        }
        (None, Some(path), Some(k)) => {
            let items: Vec<Vec<usize>> = read_table(path)?
                .into_iter()
                .map(|r| r.into_iter().map(|v| v as usize).collect())
                .collect();
            RatingsMatrix::from_labels(&items, k)?
        }
        _ => {
            return Err(CliError::config(
                "give --counts, or --labels with --categories",
            ))
        }
    };
    let k = fleiss_kappa(&matrix)?;
    Ok(json!({
        "kappa": k,
        "items": matrix.items(),
        "raters": matrix.raters(),
        "categories": matrix.categories(),
    }))
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let config = ServiceConfig::load(&a.config)?;
    let manifest = PoolManifest::load(&a.pool)?;
    let pool = ModelPool::from_manifest(&manifest)?;
    let state = AppState::open(config, pool)?;
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::other(format!("tokio runtime: {e}")))?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::config(format!("cannot bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| CliError::other(format!("listener: {e}")))?;
        log::info!("listening on {local}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::other(format!("server: {e}")))
    })
}

fn chat(a: &ChatArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.strategy)
        .map_err(|e| CliError::config(format!("{}: {e}", a.strategy.display())))?;
    let cfg: StrategyConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", a.strategy.display())))?;
    let agent = cfg.build()?;
    let mut state = ChatState::new(a.persona.clone());
    let stdout = |e: std::io::Error| CliError::other(format!("stdout: {e}"));
    let mut line = String::new();
    loop {
        write!(out, "you> ").map_err(stdout)?;
        out.flush().map_err(stdout)?;
        line.clear();
        if input.read_line(&mut line).map_err(stdout)? == 0 {
            break;
        }
        let msg = line.trim();
        match msg {
            "" => continue,
            "/quit" | "/exit" => break,
            _ => {}
        }
        match agent.respond(&mut state, msg) {
            Ok(reply) => writeln!(out, "bot> {reply}").map_err(stdout)?,
            Err(e) if e.is_retryable() => {
                writeln!(out, "(translation failed, please retry: {e})").map_err(stdout)?
            }
            Err(e) => return Err(e.into()),
        }
    }
    writeln!(out).map_err(stdout)?;
    Ok(())
}
