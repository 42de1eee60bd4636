//! `genepair`: dataset generation, tokenizers, training and evaluation for
//! the DNA/text pair-classification benchmark.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

mod commands;
mod config;
mod error;
mod output;

use config::{Common, Precision};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "genepair", version, about = "DNA/text sequence-pair benchmark toolkit")]
struct Cli {
    /// JSON config; keys mirror the subcommand's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Emit progress as JSON lines on stderr.
    #[arg(long, global = true)]
    json_logs: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Alignment-verified DNA-pair similarity dataset.
    GenDnaPairs(GenDnaPairs),
    /// Coding DNA / protein pair dataset.
    GenDnaProteinPairs(GenDnaProteinPairs),
    /// Noisy-copy text pair dataset.
    GenTextPairs(GenTextPairs),
    TrainTokenizer(TrainTokenizer),
    /// Characters-per-token statistics.
    TokenStats(TokenStats),
    /// Per-sequence character budget for a pair token budget.
    FitTruncation(FitTruncation),
    /// Language-model pretraining on a corpus mixture.
    Pretrain(Pretrain),
    /// Add tokens to a tokenizer and model.
    ExtendVocab(ExtendVocab),
    /// Pair-classification fine-tuning.
    Finetune(Finetune),
    Eval(Eval),
    /// Run an experiment grid and write the report.
    Grid(Grid),
    /// Re-check every label of a dataset against its class oracle.
    VerifyDataset(VerifyDataset),
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDnaPairs {
    #[arg(long)]
    pub sources: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub sub_rate: Option<f64>,
    #[arg(long)]
    pub indel_rate: Option<f64>,
    #[arg(long)]
    pub length_tolerance: Option<f64>,
    /// generate_at_length or truncate_long_pairs.
    #[arg(long)]
    pub construction: Option<String>,
    /// random or cross_source.
    #[arg(long)]
    pub negative_source: Option<String>,
    #[arg(long)]
    pub evalue_threshold: Option<f64>,
    #[arg(long)]
    pub negative_min_evalue: Option<f64>,
    #[arg(long)]
    pub negative_max_identity: Option<f64>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDnaProteinPairs {
    #[arg(long)]
    pub sources: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dna_len_cap: Option<usize>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenTextPairs {
    /// One sentence per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub max_chars: Option<usize>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTokenizer {
    /// Text (one document per line) or FASTA; repeatable.
    #[arg(long)]
    pub corpus: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// bpe or wordpiece.
    #[arg(long)]
    pub kind: Option<String>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenStats {
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Text, FASTA or `.jsonl` pairs; repeatable.
    #[arg(long)]
    pub input: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitTruncation {
    #[arg(long)]
    pub target_tokens: Option<usize>,
    /// Measured from --tokenizer and --input when absent.
    #[arg(long)]
    pub chars_per_token: Option<f64>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pretrain {
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// `name=path` (text or FASTA); repeatable.
    #[arg(long)]
    pub corpus: Option<Vec<String>>,
    /// Mixture weights in corpus order; default equal.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV of (step, loss).
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
    /// decoder or encoder.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtendVocab {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub tokens: Option<Vec<String>>,
    /// Also add every DNA k-mer of this length not yet in the vocabulary.
    #[arg(long)]
    pub kmer: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub out_tokenizer: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Finetune {
    /// Start from this checkpoint; otherwise a fresh model is built from
    /// the architecture flags.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Reports accuracy on this set after training.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides --epochs.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Report JSON; a `.confusion.csv` block is written beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyDataset {
    pub dataset: Option<PathBuf>,
    /// DNA_PAIR, DNA_PROTEIN_PAIR or TEXT_PAIR; read from the manifest
    /// sidecar when absent.
    #[arg(long)]
    pub task: Option<String>,
}

pub struct Globals {
    pub json_logs: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("--threads: {e}")))?;
    }
    let common = Common { seed: cli.seed, precision: cli.precision };
    let g = Globals { json_logs: cli.json_logs };
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::GenDnaPairs(a) => commands::gen_dna_pairs(config::load(cfg, &a, &common)?, &g),
        Command::GenDnaProteinPairs(a) => commands::gen_dna_protein_pairs(config::load(cfg, &a, &common)?, &g),
        Command::GenTextPairs(a) => commands::gen_text_pairs(config::load(cfg, &a, &common)?, &g),
        Command::TrainTokenizer(a) => commands::train_tokenizer(config::load(cfg, &a, &common)?, &g),
        Command::TokenStats(a) => commands::token_stats(config::load(cfg, &a, &common)?, &g),
        Command::FitTruncation(a) => commands::fit_truncation(config::load(cfg, &a, &common)?, &g),
        Command::Pretrain(a) => commands::pretrain(config::load(cfg, &a, &common)?, &g),
        Command::ExtendVocab(a) => commands::extend_vocab(config::load(cfg, &a, &common)?, &g),
        Command::Finetune(a) => commands::finetune(config::load(cfg, &a, &common)?, &g),
        Command::Eval(a) => commands::eval(config::load(cfg, &a, &common)?, &g),
        Command::Grid(a) => commands::grid(config::load(cfg, &a, &common)?, &g),
        Command::VerifyDataset(a) => commands::verify_dataset(config::load(cfg, &a, &common)?, &g),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
