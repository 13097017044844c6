use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dialport_core::model::ModelConfig;
use dialport_core::training::{Duration, EvalEvery, Schedule, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "dialport",
    version,
    about = "Port persona chatbots to new languages"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a byte-level BPE vocabulary from corpora and text files.
    TrainTokenizer(TrainTokenizerArgs),
    /// Machine-translate a dialogue corpus with a translation client.
    TranslateCorpus(TranslateCorpusArgs),
    /// Fine-tune on dialogues, or pretrain the backbone on plain text.
    Train(TrainArgs),
    /// Train one language's adapters on monolingual text.
    TrainLangAdapter(LangAdapterArgs),
    /// Train task adapters on source-language dialogues.
    TrainTaskAdapter(TaskAdapterArgs),
    /// Continue source task adapters on target-language dialogues.
    AdaptTarget(AdaptTargetArgs),
    /// Perplexity, Hits@1/3 and BLEU on a test corpus.
    Evaluate(EvaluateArgs),
    /// Fleiss' kappa of a ratings table.
    Kappa(KappaArgs),
    /// Run the chat and annotation service.
    Serve(ServeArgs),
    /// Chat with a strategy in the terminal.
    Chat(ChatArgs),
}

#[derive(Debug, Args)]
pub struct TrainTokenizerArgs {
    /// Dialogue corpora (`.json`) or plain text files, one document per line.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub vocab_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TranslateCorpusArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// `identity:SRC:TGT`, `cipher:SRC:TGT:KEY` or `decipher:SRC:TGT:KEY`.
    #[arg(long)]
    pub client: String,
    #[arg(long)]
    pub output: PathBuf,
    /// Where to write the dropped-dialogue log (default: beside the output).
    #[arg(long)]
    pub dropped: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    Finetune,
    Pretrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    LinearDecay,
    Constant,
}

/// Files every training command reads and writes.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub tokenizer: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub validation: PathBuf,
    /// Run directory; checkpoints, manifests and `run.json` go here.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Token budget per example (default: the model's max_seq_len).
    #[arg(long)]
    pub max_len: Option<usize>,
}

/// Overrides on top of the stage's default training configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainConfigArgs {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    #[arg(long, conflicts_with = "epochs")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, conflicts_with = "eval_every_fraction")]
    pub eval_every_steps: Option<usize>,
    /// Evaluate every this fraction of an epoch.
    #[arg(long)]
    pub eval_every_fraction: Option<f64>,
    #[arg(long)]
    pub checkpoints_kept: Option<usize>,
    #[arg(long)]
    pub w_lm: Option<f64>,
    #[arg(long)]
    pub w_mc: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, conflicts_with = "no_grad_clip")]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub no_grad_clip: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainConfigArgs {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(s) = self.schedule {
            cfg.schedule = match s {
                ScheduleArg::LinearDecay => Schedule::LinearDecay,
                ScheduleArg::Constant => Schedule::Constant,
            };
        }
        if let Some(n) = self.steps {
            cfg.duration = Duration::Steps(n);
        }
        if let Some(n) = self.epochs {
            cfg.duration = Duration::Epochs(n);
        }
        if let Some(n) = self.batch_size {
            cfg.batch_size = n;
        }
        if let Some(n) = self.eval_every_steps {
            cfg.eval_every = EvalEvery::Steps(n);
        }
        if let Some(f) = self.eval_every_fraction {
            cfg.eval_every = EvalEvery::EpochFraction(f);
        }
        if let Some(n) = self.checkpoints_kept {
            cfg.checkpoints_kept = n;
        }
        if let Some(v) = self.w_lm {
            cfg.loss_weights.w_lm = v;
        }
        if let Some(v) = self.w_mc {
            cfg.loss_weights.w_mc = v;
        }
        if let Some(v) = self.beta1 {
            cfg.optimizer.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.optimizer.beta2 = v;
        }
        if let Some(v) = self.adam_eps {
            cfg.optimizer.eps = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.optimizer.weight_decay = v;
        }
        if let Some(v) = self.grad_clip {
            cfg.optimizer.grad_clip = Some(v);
        }
        if self.no_grad_clip {
            cfg.optimizer.grad_clip = None;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg
    }
}

/// Shape of a freshly initialized model.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 256)]
    pub max_seq_len: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

impl ModelArgs {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers,
            d_model: self.d_model,
            n_heads: self.heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
            seed: self.model_seed,
            ..ModelConfig::toy(vocab_size)
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "finetune")]
    pub stage: TrainStage,
    #[command(flatten)]
    pub data: DataArgs,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Language tag of plain-text input (pretrain).
    #[arg(long, default_value = "und")]
    pub lang: String,
    /// Translate the corpora with this client first (train on target).
    #[arg(long)]
    pub translate_with: Option<String>,
    #[command(flatten)]
    pub train: TrainConfigArgs,
}

#[derive(Debug, Args)]
pub struct LangAdapterArgs {
    /// Pretrained backbone checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub lang: String,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainConfigArgs,
}

#[derive(Debug, Args)]
pub struct TaskAdapterArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Source-language adapter archive.
    #[arg(long)]
    pub lang_adapter: PathBuf,
    #[arg(long)]
    pub bottleneck: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainConfigArgs,
}

#[derive(Debug, Args)]
pub struct AdaptTargetArgs {
    /// Checkpoint produced by train-task-adapter.
    #[arg(long)]
    pub stage1: PathBuf,
    /// Target-language adapter archive.
    #[arg(long)]
    pub lang_adapter: PathBuf,
    /// Use only the first N target training dialogues.
    #[arg(long)]
    pub few_shot: Option<usize>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Test-split dialogue corpus.
    #[arg(long)]
    pub test: PathBuf,
    /// Language-adapter archives to load before evaluating.
    #[arg(long = "lang-adapter")]
    pub lang_adapters: Vec<PathBuf>,
    #[arg(long)]
    pub active_lang: Option<String>,
    #[arg(long, default_value = "model")]
    pub model_id: String,
    #[arg(long, default_value = "unspecified")]
    pub strategy: String,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    /// Seed of the distractor draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct KappaArgs {
    /// Items x categories table of rater counts (comma, tab or space separated).
    #[arg(long, conflicts_with = "labels", required_unless_present = "labels")]
    pub counts: Option<PathBuf>,
    /// Items x raters table of category labels starting at 0.
    #[arg(long, requires = "categories")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub categories: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service config (storage, tokens, quota, personas).
    #[arg(long)]
    pub config: PathBuf,
    /// Model pool manifest.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    /// Strategy config file.
    #[arg(long)]
    pub strategy: PathBuf,
    /// Persona sentence; repeat for several.
    #[arg(long = "persona")]
    pub persona: Vec<String>,
}
