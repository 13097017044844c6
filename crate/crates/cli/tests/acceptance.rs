//! Acceptance suite A1-A6. Runs as a plain binary (`harness = false`) and
//! prints one PASS/FAIL line per criterion; pass criterion names as
//! arguments to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use dialport_core::adapters::{AdapterKey, AdapterSpec, FreezePlan};
use dialport_core::data::{
    dialogue_examples, toy, translate_corpus, CipherClient, Corpus, ExampleConfig, IdentityClient,
    Split, TextCorpus, Tokenizer, Turn, WordCipher,
};
use dialport_core::eval::{
    bleu, evaluate_model, fleiss_kappa, hits_at_k_from_scores, perplexity, EvalConfig,
    RatingsMatrix, Smoothing,
};
use dialport_core::model::{Grads, LossWeights, ModelConfig, TransformerModel};
use dialport_core::strategy::{
    run_cross_lingual, ChatState, CrossLingualInputs, DecodingConfig, DialogueAgent, ModelAgent,
    TestOnSource,
};
use dialport_core::training::{
    adapt_task_adapter_target, double_head_loss, finetune_double_head, pretrain_language_model,
    train_language_adapter, train_task_adapter_source, Duration, EvalEvery, Stage, TextData,
    TrainConfig, TrainOutcome,
};
use dialport_core::{checkpoint::load_model, training::DialogueData};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 6] = [
        ("A1", "adapter identity and freeze plans", a1),
        ("A2", "overfit a 10-dialogue corpus", a2),
        ("A3", "metric oracles", a3),
        ("A4", "cross-lingual transfer to a cipher language", a4),
        ("A5", "strategy equivalences", a5),
        ("A6", "protocol replication and gradient check", a6),
    ];
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{id} PASS [{secs:.1}s] {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id} FAIL [{secs:.1}s] {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

fn small_config(vocab: usize, d: usize, layers: usize, ff: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        d_model: d,
        n_heads: 2,
        d_ff: ff,
        dropout: 0.0,
        seed: 5,
        ..ModelConfig::toy(vocab)
    }
}

fn short(mut cfg: TrainConfig, steps: usize, batch: usize, lr: f64) -> TrainConfig {
    cfg.duration = Duration::Steps(steps);
    cfg.eval_every = EvalEvery::Steps(steps);
    cfg.batch_size = batch;
    cfg.learning_rate = lr;
    cfg.checkpoints_kept = 1;
    cfg
}

fn tokenizer_for(texts: &[String], vocab: usize) -> Result<Tokenizer, String> {
    ok(Tokenizer::train(texts.iter().map(String::as_str), vocab))
}

// A1 -----------------------------------------------------------------------

fn bitwise_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn check_stage(name: &str, outcome: &TrainOutcome, expected: &[String]) -> Result<(), String> {
    let mut expected = expected.to_vec();
    expected.sort();
    ensure!(!expected.is_empty(), "{name}: empty trainable set");
    ensure!(
        outcome.total_steps >= 3,
        "{name}: only {} steps",
        outcome.total_steps
    );
    ensure!(
        outcome.changed == expected,
        "{name}: changed {:?} but the freeze plan trains {:?}",
        outcome.changed,
        expected
    );
    Ok(())
}

fn a1() -> Outcome {
    let en = toy::persona_corpus("en", Split::Train, 3, 11);
    let en_valid = toy::persona_corpus("en", Split::Validation, 2, 12);
    let cipher = CipherClient::encipher("en", "xx", 4);
    let xx = ok(translate_corpus(&en, &cipher))?.corpus;
    let xx_valid = ok(translate_corpus(&en_valid, &cipher))?.corpus;
    let texts: Vec<String> = en
        .texts()
        .chain(xx.texts())
        .map(str::to_owned)
        .chain(toy::text_lines(200, 3))
        .collect();
    let tok = tokenizer_for(&texts, 360)?;
    let base = ok(TransformerModel::new(small_config(
        tok.vocab_size(),
        32,
        2,
        64,
    )))?;

    let d = base.config().d_model;
    let mut adapted = base.clone();
    ok(adapted.attach_adapters(&[
        AdapterSpec::language_default("en", d),
        AdapterSpec::language_default("xx", d),
        AdapterSpec::task_default(d),
    ]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let vocab = base.config().vocab_size as u32;
    for batch in 0..10 {
        let len = rng.gen_range(4..48);
        let rows = rng.gen_range(1..4);
        let tokens: Vec<Vec<u32>> = (0..rows)
            .map(|_| (0..len).map(|_| rng.gen_range(0..vocab)).collect())
            .collect();
        let segments: Vec<Vec<u32>> = (0..rows)
            .map(|_| (0..len).map(|_| rng.gen_range(0..3)).collect())
            .collect();
        let want = ok(base.forward(&tokens, &segments, None))?;
        for lang in ["en", "xx"] {
            ok(adapted.set_active_language(lang))?;
            let got = ok(adapted.forward(&tokens, &segments, None))?;
            ensure!(
                bitwise_equal(
                    want.logits.as_slice().unwrap(),
                    got.logits.as_slice().unwrap()
                ),
                "batch {batch}: logits differ with {lang} adapters active"
            );
        }
    }

    let dir = ok(tempfile::tempdir())?;
    let out = |s: &str| dir.path().join(s);
    let text_en = TextCorpus::new("en", toy::text_lines(24, 1));
    let text_valid = TextCorpus::new("en", toy::text_lines(6, 2));
    let td = TextData::new(&tok, 64, &text_en, &text_valid);
    let ex = ExampleConfig::new(256);
    let lr = 2e-3;

    let mut m = base.clone();
    let expected = ok(FreezePlan::everything().trainable_set(m.params()))?;
    let data = DialogueData::new(&tok, ex, &en, &en_valid);
    let o = ok(finetune_double_head(
        &mut m,
        &data,
        &short(TrainConfig::finetune(), 3, 2, lr),
        &out("finetune"),
    ))?;
    check_stage("finetune", &o, &expected)?;

    let mut m = adapted.clone();
    ok(m.set_active_language("en"))?;
    let expected = ok(FreezePlan::backbone_language_model(&m).trainable_set(m.params()))?;
    let o = ok(pretrain_language_model(
        &mut m,
        &td,
        &short(TrainConfig::pretrain(), 3, 4, lr),
        &out("pretrain"),
    ))?;
    check_stage("pretrain", &o, &expected)?;

    let expected = ok(FreezePlan::language_adapter("en").trainable_set(m.params()))?;
    let o = ok(train_language_adapter(
        &mut m,
        &td,
        "en",
        &short(TrainConfig::lang_adapter(), 3, 4, lr),
        &out("lang"),
    ))?;
    check_stage("lang_adapter", &o, &expected)?;

    let expected = ok(FreezePlan::task_adapters().trainable_set(m.params()))?;
    let stage1 = ok(train_task_adapter_source(
        &mut m,
        &data,
        &short(TrainConfig::task_adapter(Stage::TaskAdapterSrc), 3, 2, lr),
        &out("task_src"),
    ))?;
    check_stage("task_adapter_src", &stage1, &expected)?;

    ok(m.set_active_language("xx"))?;
    let data_xx = DialogueData::new(&tok, ex, &xx, &xx_valid);
    let o = ok(adapt_task_adapter_target(
        &mut m,
        &data_xx,
        Some(&stage1.final_record),
        &short(TrainConfig::task_adapter(Stage::TaskAdapterTgt), 3, 2, lr),
        &out("task_tgt"),
    ))?;
    check_stage("task_adapter_tgt", &o, &expected)?;

    Ok("10 batches bitwise equal under en/xx adapters; 5 stages changed exactly their trainable sets".into())
}

// A2 -----------------------------------------------------------------------

fn a2() -> Outcome {
    let train = toy::persona_corpus("en", Split::Train, 10, 1);
    let texts: Vec<String> = train
        .texts()
        .map(str::to_owned)
        .chain(toy::text_lines(2000, 2))
        .collect();
    let tok = tokenizer_for(&texts, 400)?;
    let mut config = ModelConfig::toy(tok.vocab_size());
    config.dropout = 0.0;
    ensure!(
        config.n_layers == 4 && config.d_model == 128,
        "toy model is not 4-layer/d=128"
    );
    let mut model = ok(TransformerModel::new(config))?;
    let validation = train.clone().with_split(Split::Validation);
    let data = DialogueData::new(&tok, ExampleConfig::new(256), &train, &validation);
    let mut cfg = TrainConfig::finetune();
    cfg.learning_rate = 1e-3;
    cfg.duration = Duration::Steps(500);
    cfg.batch_size = 4;
    cfg.eval_every = EvalEvery::Steps(100);
    cfg.checkpoints_kept = 1;
    let dir = ok(tempfile::tempdir())?;
    let t = Instant::now();
    let outcome = ok(finetune_double_head(&mut model, &data, &cfg, dir.path()))?;
    ensure!(
        outcome.total_steps == 500,
        "ran {} steps",
        outcome.total_steps
    );
    let train_secs = t.elapsed().as_secs_f64();

    let mut ecfg = EvalConfig::new(256);
    ecfg.max_new_tokens = 32;
    let report = ok(evaluate_model(
        &model,
        &tok,
        &train.clone().with_split(Split::Test),
        &ecfg,
    ))?;
    let detail = format!(
        "perplexity {:.4}, Hits@1 {:.3}, BLEU {:.4} ({} items, training {train_secs:.0}s)",
        report.perplexity, report.hits_at_1, report.bleu, report.counts.items
    );
    ensure!(report.perplexity < 1.5, "perplexity too high: {detail}");
    ensure!(report.hits_at_1 > 0.9, "Hits@1 too low: {detail}");
    ensure!(report.bleu > 0.8, "BLEU too low: {detail}");
    Ok(detail)
}

// A3 -----------------------------------------------------------------------

/// Clipped n-gram matches by explicit counting over index windows.
fn brute_ngram_stats(h: &[&str], r: &[&str], n: usize) -> (u64, u64) {
    if h.len() < n {
        return (0, 0);
    }
    let grams_h: Vec<&[&str]> = (0..=h.len() - n).map(|i| &h[i..i + n]).collect();
    let grams_r: Vec<&[&str]> = if r.len() >= n {
        (0..=r.len() - n).map(|i| &r[i..i + n]).collect()
    } else {
        Vec::new()
    };
    let mut matched = 0u64;
    let mut seen: Vec<&[&str]> = Vec::new();
    for g in &grams_h {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        let in_h = grams_h.iter().filter(|x| *x == g).count() as u64;
        let in_r = grams_r.iter().filter(|x| *x == g).count() as u64;
        matched += in_h.min(in_r);
    }
    (matched, grams_h.len() as u64)
}

fn brute_bleu(pairs: &[(String, String)], max_n: usize, epsilon: Option<f64>) -> f64 {
    let mut m = vec![0u64; max_n];
    let mut t = vec![0u64; max_n];
    let (mut hl, mut rl) = (0u64, 0u64);
    for (h, r) in pairs {
        let h: Vec<&str> = h.split_whitespace().collect();
        let r: Vec<&str> = r.split_whitespace().collect();
        hl += h.len() as u64;
        rl += r.len() as u64;
        for n in 1..=max_n {
            let (a, b) = brute_ngram_stats(&h, &r, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
    }
    if hl == 0 || m[0] == 0 {
        return 0.0;
    }
    let bp = if hl > rl {
        1.0
    } else {
        (1.0 - rl as f64 / hl as f64).exp()
    };
    let mut logs = Vec::new();
    for n in 0..max_n {
        if t[n] == 0 {
            continue;
        }
        let matches = if m[n] == 0 {
            match epsilon {
                Some(e) => e,
                None => return 0.0,
            }
        } else {
            m[n] as f64
        };
        logs.push((matches / t[n] as f64).ln());
    }
    bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Fleiss' kappa as an exact fraction; `None` when chance agreement is 1.
fn brute_kappa(counts: &[Vec<u32>]) -> Option<f64> {
    let items = counts.len() as i128;
    let raters: i128 = counts[0].iter().map(|&c| c as i128).sum();
    let k = counts[0].len();
    // Observed agreement: a / b.
    let sq: i128 = counts.iter().flatten().map(|&c| (c as i128).pow(2)).sum();
    let a = sq - items * raters;
    let b = items * raters * (raters - 1);
    // Chance agreement: c / d.
    let c: i128 = (0..k)
        .map(|j| counts.iter().map(|row| row[j] as i128).sum::<i128>().pow(2))
        .sum();
    let d = (items * raters).pow(2);
    let num = a * d - c * b;
    let den = b * (d - c);
    if den == 0 {
        return None;
    }
    let g = gcd(num, den);
    Some((num / g) as f64 / (den / g) as f64)
}

fn a3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // Uniform logits: the weight-tied head gives all-zero logits when the
    // token embedding is zero.
    let corpus = toy::persona_corpus("en", Split::Test, 2, 8);
    let texts: Vec<String> = corpus.texts().map(str::to_owned).collect();
    let tok = tokenizer_for(&texts, 300)?;
    let mut model = ok(TransformerModel::new(small_config(
        tok.vocab_size(),
        16,
        1,
        32,
    )))?;
    let id = model
        .params()
        .id("backbone.tok_emb")
        .ok_or("no token embedding")?;
    model.params_mut().get_mut(id).data.fill(0.0);
    let v = model.config().vocab_size as f64;
    let ppl = ok(perplexity(&model, &corpus, &tok, &ExampleConfig::new(256)))?;
    ensure!(
        (ppl - v).abs() <= 1e-6,
        "uniform perplexity {ppl} != vocab {v}"
    );

    let items: Vec<(Vec<f64>, usize)> = (0..10_000)
        .map(|_| {
            let scores = (0..3).map(|_| rng.gen::<f64>()).collect();
            (scores, rng.gen_range(0..3))
        })
        .collect();
    let h1 = ok(hits_at_k_from_scores(&items, 1))?;
    ensure!(
        (h1 - 1.0 / 3.0).abs() <= 0.02,
        "chance Hits@1 {h1} is not 1/3"
    );

    let words = ["a", "b", "c", "d", "e", "f"];
    let phrase = |rng: &mut ChaCha8Rng| -> String {
        let n = rng.gen_range(1..12);
        (0..n)
            .map(|_| words[rng.gen_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let pairs: Vec<(String, String)> = (0..50)
        .map(|_| (phrase(&mut rng), phrase(&mut rng)))
        .collect();
    let mut worst = 0.0f64;
    for smoothing in [Smoothing::None, Smoothing::AddEpsilon { epsilon: 0.1 }] {
        let eps = match smoothing {
            Smoothing::AddEpsilon { epsilon } => Some(epsilon),
            Smoothing::None => None,
        };
        for pair in &pairs {
            let got = ok(bleu(&[&pair.0], &[&pair.1], 4, smoothing))?.score;
            let want = brute_bleu(std::slice::from_ref(pair), 4, eps);
            worst = worst.max((got - want).abs());
        }
        let (h, r): (Vec<&str>, Vec<&str>) =
            pairs.iter().map(|(h, r)| (h.as_str(), r.as_str())).unzip();
        let got = ok(bleu(&h, &r, 4, smoothing))?.score;
        worst = worst.max((got - brute_bleu(&pairs, 4, eps)).abs());
    }
    ensure!(worst <= 1e-9, "BLEU differs from brute force by {worst}");

    let fixture = vec![vec![3, 0], vec![2, 1]];
    let k = ok(fleiss_kappa(&ok(RatingsMatrix::new(fixture.clone()))?))?;
    ensure!(k == -0.2, "fixture kappa {k} != -0.2");
    ensure!(
        brute_kappa(&fixture) == Some(-0.2),
        "oracle disagrees on fixture"
    );
    let perfect = vec![vec![3, 0], vec![0, 3], vec![3, 0]];
    let k = ok(fleiss_kappa(&ok(RatingsMatrix::new(perfect))?))?;
    ensure!(k == 1.0, "perfect-agreement kappa {k} != 1");

    Ok(format!(
        "uniform ppl {ppl} (V={v}), chance Hits@1 {h1:.4}, BLEU max diff {worst:.1e}, kappa -0.2 and 1.0"
    ))
}

// A4 -----------------------------------------------------------------------

fn a4() -> Outcome {
    let key = 7;
    let word = WordCipher::new(key);
    let cipher = CipherClient::encipher("en", "xx", key);
    let enc =
        |c: &Corpus| -> Result<Corpus, String> { Ok(ok(translate_corpus(c, &cipher))?.corpus) };

    let src_train = toy::persona_corpus("en", Split::Train, 40, 21);
    let src_valid = toy::persona_corpus("en", Split::Validation, 5, 22);
    let tgt_train = enc(&toy::persona_corpus("en", Split::Train, 50, 31))?;
    let tgt_valid = enc(&toy::persona_corpus("en", Split::Validation, 5, 32))?;
    let tgt_test = enc(&toy::persona_corpus("en", Split::Test, 10, 41))?;

    let en_lines = toy::text_lines(2000, 51);
    let xx_lines: Vec<String> = toy::text_lines(2000, 52)
        .iter()
        .map(|l| word.encipher(l))
        .collect();
    let texts: Vec<String> = src_train
        .texts()
        .chain(tgt_train.texts())
        .map(str::to_owned)
        .chain(en_lines.iter().take(500).cloned())
        .chain(xx_lines.iter().take(500).cloned())
        .collect();
    let tok = tokenizer_for(&texts, 600)?;
    let dir = ok(tempfile::tempdir())?;
    let lr = 1e-3;

    // Multilingual backbone.
    let mut base = ok(TransformerModel::new(small_config(
        tok.vocab_size(),
        64,
        2,
        256,
    )))?;
    let mixed: Vec<String> = en_lines[..1800]
        .iter()
        .chain(&xx_lines[..1800])
        .cloned()
        .collect();
    let held: Vec<String> = en_lines[1800..]
        .iter()
        .chain(&xx_lines[1800..])
        .cloned()
        .collect();
    let (mul_train, mul_valid) = (TextCorpus::new("mul", mixed), TextCorpus::new("mul", held));
    let mut cfg = short(TrainConfig::pretrain(), 400, 16, lr);
    cfg.eval_every = EvalEvery::Steps(200);
    ok(pretrain_language_model(
        &mut base,
        &TextData::new(&tok, 64, &mul_train, &mul_valid),
        &cfg,
        &dir.path().join("pretrain"),
    ))?;

    // Language adapters on monolingual text.
    let mut adapters = BTreeMap::new();
    for (lang, lines) in [("en", &en_lines), ("xx", &xx_lines)] {
        let mut m = base.clone();
        ok(m.attach_adapters(&[AdapterSpec::language_default(lang, m.config().d_model)]))?;
        let train = TextCorpus::new(lang, lines[..1800].to_vec());
        let valid = TextCorpus::new(lang, lines[1800..].to_vec());
        ok(train_language_adapter(
            &mut m,
            &TextData::new(&tok, 64, &train, &valid),
            lang,
            &short(TrainConfig::lang_adapter(), 200, 16, lr),
            &dir.path().join(format!("lang-{lang}")),
        ))?;
        let path: PathBuf = dir.path().join(format!("adapter-{lang}.safetensors"));
        ok(m.save_adapters(&AdapterKey::language(lang), &path))?;
        adapters.insert(lang.to_owned(), path);
    }

    // Task adapters: source stage, then target stage.
    let mut stage1 = short(TrainConfig::task_adapter(Stage::TaskAdapterSrc), 300, 4, lr);
    stage1.eval_every = EvalEvery::Steps(150);
    let mut stage2 = short(TrainConfig::task_adapter(Stage::TaskAdapterTgt), 200, 4, lr);
    stage2.eval_every = EvalEvery::Steps(100);
    let inputs = CrossLingualInputs {
        tokenizer: &tok,
        examples: ExampleConfig::new(256),
        source_train: &src_train,
        source_validation: &src_valid,
        target_train: &tgt_train,
        target_validation: &tgt_valid,
        lang_adapters: adapters.clone(),
        task_bottleneck: None,
        few_shot: None,
        stage1,
        stage2,
    };
    let mut model = base.clone();
    let out = ok(run_cross_lingual(
        &mut model,
        &inputs,
        &dir.path().join("xl"),
    ))?;

    let task = AdapterKey::task().prefix();
    let pick = |m: &BTreeMap<String, String>| -> BTreeMap<String, String> {
        m.iter()
            .filter(|(k, _)| k.starts_with(&task))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    };
    let carried = pick(&out.stage1.end_snapshot);
    ensure!(!carried.is_empty(), "no task-adapter tensors recorded");
    ensure!(
        pick(&out.stage2.start_snapshot) == carried,
        "task adapters at stage-2 start differ from stage-1 end"
    );
    // Independently: the stage-1 checkpoint holds exactly those bytes.
    let saved = ok(load_model(&out.stage1_final().path))?;
    let digests = pick(&saved.params().snapshot());
    ensure!(
        digests == carried,
        "stage-1 checkpoint disagrees with its end snapshot"
    );

    let ex = ExampleConfig::new(256);
    let base_ppl = ok(perplexity(&base, &tgt_test, &tok, &ex))?;
    let mut s1 = saved;
    ok(s1.load_adapters(&adapters["xx"]))?;
    ok(s1.set_active_language("xx"))?;
    let stage1_ppl = ok(perplexity(&s1, &tgt_test, &tok, &ex))?;
    let stage2_ppl = ok(perplexity(&model, &tgt_test, &tok, &ex))?;
    let detail = format!(
        "L_T test perplexity: base {base_ppl:.3}, stage 1 {stage1_ppl:.3}, stage 2 {stage2_ppl:.3}; {} task tensors carried byte-equal",
        carried.len()
    );
    ensure!(stage2_ppl < stage1_ppl, "no gain over stage 1: {detail}");
    ensure!(stage2_ppl < base_ppl, "no gain over the base: {detail}");
    Ok(detail)
}

// A5 -----------------------------------------------------------------------

fn script() -> Vec<String> {
    let corpus = toy::persona_corpus("en", Split::Test, 6, 61);
    corpus
        .dialogues
        .iter()
        .flat_map(|d| d.turns.iter().step_by(2).map(|t| t.text.clone()))
        .take(20)
        .collect()
}

fn a5() -> Outcome {
    let corpus = toy::persona_corpus("en", Split::Train, 4, 62);
    let texts: Vec<String> = corpus.texts().map(str::to_owned).collect();
    let tok = tokenizer_for(&texts, 340)?;
    let mut model = ok(TransformerModel::new(small_config(
        tok.vocab_size(),
        32,
        2,
        64,
    )))?;
    let valid = corpus.clone().with_split(Split::Validation);
    let dir = ok(tempfile::tempdir())?;
    ok(finetune_double_head(
        &mut model,
        &DialogueData::new(&tok, ExampleConfig::new(256), &corpus, &valid),
        &short(TrainConfig::finetune(), 30, 4, 2e-3),
        dir.path(),
    ))?;
    let decoding = DecodingConfig {
        max_new_tokens: 12,
        sampling: None,
    };
    let agent = || ModelAgent::new(model.clone(), tok.clone(), decoding).map_err(|e| e.to_string());
    let turns = script();
    ensure!(turns.len() == 20, "script has {} turns", turns.len());
    let persona = corpus.dialogues[0].persona.clone();

    let bare = agent()?;
    let mut bare_state = ChatState::new(persona.clone());
    let bare_replies = turns
        .iter()
        .map(|t| bare.respond(&mut bare_state, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;

    let identity = ok(TestOnSource::new(
        agent()?,
        Box::new(IdentityClient::new("xx", "en")),
        Box::new(IdentityClient::new("en", "xx")),
    ))?;
    let mut state = ChatState::new(persona.clone());
    for (i, t) in turns.iter().enumerate() {
        let r = ok(identity.respond(&mut state, t))?;
        ensure!(
            r == bare_replies[i],
            "identity turn {i}: {r:?} != {:?}",
            bare_replies[i]
        );
    }
    ensure!(state == bare_state, "identity history diverged");

    let key = 13;
    let word = WordCipher::new(key);
    let wrapped = ok(TestOnSource::new(
        agent()?,
        Box::new(CipherClient::decipher("xx", "en", key)),
        Box::new(CipherClient::encipher("en", "xx", key)),
    ))?;
    let mut state = ChatState::new(persona.clone());
    let mut transcript = Vec::new();
    for t in &turns {
        let user = word.encipher(t);
        let reply = ok(wrapped.respond(&mut state, &user))?;
        transcript.push(Turn::user(word.decipher(&user)));
        transcript.push(Turn::bot(word.decipher(&reply)));
    }
    ensure!(
        transcript == bare_state.history,
        "deciphered transcript differs from the bare model"
    );
    let distinct: std::collections::BTreeSet<&String> = bare_replies.iter().collect();
    Ok(format!(
        "20 turns identical under identity and cipher ({} distinct replies)",
        distinct.len()
    ))
}

// A6 -----------------------------------------------------------------------

fn a6() -> Outcome {
    let service = protocol::run()?;
    let grad = gradient_check()?;
    Ok(format!("{service}; {grad}"))
}

fn gradient_check() -> Outcome {
    let corpus = toy::persona_corpus("en", Split::Train, 2, 71);
    let texts: Vec<String> = corpus.texts().map(str::to_owned).collect();
    let tok = tokenizer_for(&texts, 300)?;
    let mut model = ok(TransformerModel::new(small_config(
        tok.vocab_size(),
        16,
        2,
        32,
    )))?;
    let d = model.config().d_model;
    ok(model.attach_adapters(&[
        AdapterSpec::language_default("en", d),
        AdapterSpec::task_default(d),
    ]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    // Zero up-projections would hide the adapter gradients.
    for (_, p) in model.params_mut().iter_mut() {
        if p.name.contains(".up.") {
            for x in p.data.iter_mut() {
                *x = rng.gen_range(-0.05..0.05);
            }
        }
    }
    let examples = ok(dialogue_examples(
        &corpus,
        &tok,
        &ExampleConfig::new(96),
        &mut rng,
    ))?;
    let batch: Vec<_> = examples.iter().take(2).collect();
    let weights = LossWeights::new(2.0, 1.0).map_err(|e| e.to_string())?;
    let mut grads = Grads::for_all(model.params());
    ok(double_head_loss(
        &model,
        &batch,
        weights,
        None,
        Some(&mut grads),
    ))?;

    let h = 1e-4;
    let ids: Vec<_> = model
        .params()
        .iter()
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (id, name) in ids {
        let g = grads
            .get(id)
            .ok_or(format!("no gradient buffer for {name}"))?
            .to_vec();
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let mut picks: Vec<usize> = order.into_iter().take(3).collect();
        picks.push(rng.gen_range(0..g.len()));
        for i in picks {
            let orig = model.params().get(id).data[i];
            let mut eval = |x: f64| -> Result<f64, String> {
                model.params_mut().get_mut(id).data[i] = x;
                Ok(ok(double_head_loss(&model, &batch, weights, None, None))?.total)
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            model.params_mut().get_mut(id).data[i] = orig;
            let scale = g[i].abs().max(numeric.abs());
            let diff = (g[i] - numeric).abs();
            checked += 1;
            if scale < 1e-7 {
                ensure!(
                    diff < 1e-7,
                    "{name}[{i}]: analytic {} vs numeric {numeric}",
                    g[i]
                );
                continue;
            }
            let rel = diff / scale;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]"));
            }
        }
    }
    ensure!(
        worst.0 <= 1e-3,
        "relative gradient error {:.2e} at {}",
        worst.0,
        worst.1
    );
    Ok(format!(
        "gradient check on {checked} coordinates, max relative error {:.1e}",
        worst.0
    ))
}

mod protocol {
    use super::*;
    use std::sync::Arc;

    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use axum::Router;
    use dialport_service::{router, AppState, ModelPool, Role, ServiceConfig, TokenEntry};
    use http_body_util::BodyExt;
    use serde_json::{json, Value};
    use tower::ServiceExt;

    const TESTER: &str = "t-tester";
    const ADMIN: &str = "t-admin";
    const CRITERIA: [&str; 3] = ["coherence", "engagingness", "humanness"];

    fn annotator(i: usize) -> String {
        format!("t-ann{i}")
    }

    async fn call(
        app: &Router,
        method: &str,
        uri: &str,
        token: &str,
        body: Option<Value>,
    ) -> Result<(StatusCode, Value), String> {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("authorization", format!("Bearer {token}"))
            .header("content-type", "application/json");
        let req = ok(req.body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        }))?;
        let resp = ok(app.clone().oneshot(req).await)?;
        let status = resp.status();
        let bytes = ok(resp.into_body().collect().await)?.to_bytes();
        Ok((
            status,
            serde_json::from_slice(&bytes).unwrap_or(Value::Null),
        ))
    }

    fn mentions_model(v: &Value) -> bool {
        let s = v.to_string();
        s.contains("model_id") || s.contains("pool-model-")
    }

    pub fn run() -> Outcome {
        let rt = ok(tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build())?;
        rt.block_on(session_round_trip())
    }

    async fn session_round_trip() -> Outcome {
        let dir = ok(tempfile::tempdir())?;
        let mut tokens = vec![
            TokenEntry {
                token: TESTER.into(),
                user: "tester".into(),
                role: Role::Tester,
            },
            TokenEntry {
                token: ADMIN.into(),
                user: "admin".into(),
                role: Role::Admin,
            },
        ];
        for i in 0..4 {
            tokens.push(TokenEntry {
                token: annotator(i),
                user: format!("annotator{i}"),
                role: Role::Annotator,
            });
        }
        let config = ServiceConfig::new(dir.path(), tokens);
        let pool = ModelPool::echo(&["pool-model-a", "pool-model-b", "pool-model-c"]);
        let state: Arc<AppState> = ok(AppState::open(config, pool))?;
        let app = router(state);

        let mut ids = Vec::new();
        for s in 0..9 {
            let (status, v) = call(&app, "POST", "/sessions", TESTER, Some(json!({}))).await?;
            ensure!(
                status == StatusCode::CREATED,
                "create session: {status} {v}"
            );
            ensure!(
                !mentions_model(&v),
                "session payload reveals the model: {v}"
            );
            let id = v["session_id"].as_str().ok_or("no session id")?.to_owned();
            for turn in 0..(3 + s % 3) {
                let (status, v) = call(
                    &app,
                    "POST",
                    &format!("/sessions/{id}/messages"),
                    TESTER,
                    Some(json!({"text": format!("turn {turn} of session {s}")})),
                )
                .await?;
                ensure!(status == StatusCode::OK, "message: {status} {v}");
                ensure!(!mentions_model(&v), "reply payload reveals the model: {v}");
            }
            let (status, v) = call(
                &app,
                "POST",
                &format!("/sessions/{id}/end"),
                TESTER,
                Some(json!({"reason": "normal"})),
            )
            .await?;
            ensure!(status == StatusCode::OK, "end: {status} {v}");
            ensure!(!mentions_model(&v), "end payload reveals the model: {v}");
            ids.push(id);
        }

        let (_, v) = call(
            &app,
            "GET",
            "/conversations?status=all",
            &annotator(0),
            None,
        )
        .await?;
        ensure!(!mentions_model(&v), "annotator listing reveals the model");
        let (_, v) = call(&app, "GET", "/conversations?status=all", ADMIN, None).await?;
        let mut model_of = BTreeMap::new();
        for c in v["conversations"]
            .as_array()
            .ok_or("no conversation list")?
        {
            model_of.insert(
                c["conversation_id"].as_str().ok_or("no id")?.to_owned(),
                c["model_id"]
                    .as_str()
                    .ok_or("admin view lacks model_id")?
                    .to_owned(),
            );
        }
        let mut served: BTreeMap<&str, usize> = BTreeMap::new();
        for id in &ids {
            *served
                .entry(model_of.get(id).ok_or("session missing from listing")?)
                .or_default() += 1;
        }
        ensure!(
            served.values().all(|&n| n == 3) && served.len() == 3,
            "sessions not balanced 3/3/3: {served:?}"
        );

        // Three annotators per conversation with random scores.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut given: BTreeMap<String, Vec<[u8; 3]>> = BTreeMap::new();
        for id in &ids {
            for a in 0..3 {
                let s: [u8; 3] = [
                    rng.gen_range(1..=5),
                    rng.gen_range(1..=5),
                    rng.gen_range(1..=5),
                ];
                let (status, v) = call(
                    &app,
                    "POST",
                    &format!("/conversations/{id}/ratings"),
                    &annotator(a),
                    Some(json!({"coherence": s[0], "engagingness": s[1], "humanness": s[2]})),
                )
                .await?;
                ensure!(status == StatusCode::CREATED, "rating: {status} {v}");
                given.entry(id.clone()).or_default().push(s);
            }
            let (status, v) = call(
                &app,
                "POST",
                &format!("/conversations/{id}/ratings"),
                &annotator(3),
                Some(json!({"coherence": 3, "engagingness": 3, "humanness": 3})),
            )
            .await?;
            ensure!(
                status == StatusCode::CONFLICT,
                "fourth annotator accepted: {status} {v}"
            );
        }

        let (status, report) = call(&app, "GET", "/reports/agreement", ADMIN, None).await?;
        ensure!(status == StatusCode::OK, "agreement report: {status}");
        let rows = report["rows"].as_array().ok_or("no rows")?;
        let mut expected_rows: Vec<String> = served.keys().map(|s| s.to_string()).collect();
        expected_rows.push("overall".into());
        let got_rows: Vec<String> = rows
            .iter()
            .filter_map(|r| r["model"].as_str().map(str::to_owned))
            .collect();
        ensure!(got_rows == expected_rows, "rows {got_rows:?}");
        let mut cells = 0;
        for row in rows {
            let model = row["model"].as_str().unwrap_or_default();
            let members: Vec<&String> = ids
                .iter()
                .filter(|id| model == "overall" || model_of[*id] == model)
                .collect();
            for (c, crit) in CRITERIA.iter().enumerate() {
                let counts: Vec<Vec<u32>> = members
                    .iter()
                    .map(|id| {
                        let mut row = vec![0u32; 5];
                        for s in &given[*id] {
                            row[usize::from(s[c]) - 1] += 1;
                        }
                        row
                    })
                    .collect();
                let want = brute_kappa(&counts);
                let got = row["cells"][crit]["kappa"].as_f64();
                let same = match (want, got) {
                    (Some(w), Some(g)) => (w - g).abs() <= 1e-12,
                    (None, None) => true,
                    _ => false,
                };
                ensure!(same, "{model}/{crit}: report {got:?}, brute force {want:?}");
                cells += 1;
            }
        }
        Ok(format!(
            "9 blind sessions balanced {:?}, quota of 3 enforced, {cells} kappa cells match brute force",
            served.values().collect::<Vec<_>>()
        ))
    }
}
