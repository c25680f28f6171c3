mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 1,
    Data = 2,
    Runtime = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

pub type CmdResult<T> = Result<T, Failure>;

/// Tags an error with its exit status.
pub trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn data(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure { kind: Kind::Usage, error: e.into() })
    }
    fn data(self) -> CmdResult<T> {
        self.map_err(|e| Failure { kind: Kind::Data, error: e.into() })
    }
    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure { kind: Kind::Runtime, error: e.into() })
    }
}

#[derive(Parser)]
#[command(name = "materium", version, about = "Tokenize crystals, train the conditional transformer, sample and evaluate")]
struct Cli {
    /// TOML or JSON file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a crystal corpus into token sequences and report statistics.
    Tokenize(TokenizeFlags),
    /// Train a model on a crystal or token corpus.
    Train(TrainFlags),
    /// Sample crystals from a checkpoint.
    Generate(GenerateFlags),
    /// Compute metrics over a generated set.
    Evaluate(EvaluateFlags),
    /// Pretty-print a record, a token sequence or a checkpoint header.
    Inspect(InspectFlags),
    /// Write a synthetic charge-neutral toy corpus.
    Synth(SynthFlags),
}

#[derive(Args, Serialize)]
pub struct TokenizeFlags {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Token corpus output (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Statistics output (JSON); printed to stdout either way.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// low, high, xyz or random:SEED.
    #[arg(long)]
    pub ordering: Option<String>,
    /// Element table CSV replacing the bundled one.
    #[arg(long)]
    pub tables: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct TrainFlags {
    /// Crystal corpus or token corpus (JSONL).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Run directory for checkpoints and metrics.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tables: Option<PathBuf>,
    /// Model size preset: tiny or paper.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_emb: Option<usize>,
    #[arg(long)]
    pub d_ffn_hidden: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Condition schema, e.g. density,hhi,formula (formula last).
    #[arg(long, value_delimiter = ',')]
    pub conditions: Option<Vec<String>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_factor: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub cond_dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub ordering: Option<String>,
    /// Continue from OUT/last.ckpt.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub resume: bool,
}

#[derive(Args, Serialize)]
pub struct GenerateFlags {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output JSONL; statistics go next to it as `.stats.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tables: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_atoms: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    /// Grammar-constrained decoding (default true).
    #[arg(long)]
    pub constrain: Option<bool>,
    /// Shorthand for `--constrain false`.
    #[arg(long)]
    #[serde(skip)]
    pub unconstrained: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// eV.
    #[arg(long)]
    pub band_gap: Option<f64>,
    /// Å⁻³.
    #[arg(long)]
    pub magnetic_density: Option<f64>,
    /// g/cm³.
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub space_group: Option<u32>,
    /// Raw HHI score.
    #[arg(long)]
    pub hhi: Option<f64>,
    /// Composition such as Fe1O1 or SrTiO3.
    #[arg(long)]
    pub formula: Option<String>,
}

#[derive(Args, Serialize)]
pub struct EvaluateFlags {
    #[arg(long)]
    pub generated: Option<PathBuf>,
    /// Output directory for report.json, report.csv and hhi_histogram.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tables: Option<PathBuf>,
    /// Training corpus (JSONL) used for novelty.
    #[arg(long)]
    pub training: Option<PathBuf>,
    /// Precomputed training fingerprints, one per line.
    #[arg(long)]
    pub fingerprints: Option<PathBuf>,
    /// atom_fraction or max_element.
    #[arg(long)]
    pub hhi_weighting: Option<String>,
    /// Generation statistics; defaults to the file written next to the generated set.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Args, Serialize)]
pub struct InspectFlags {
    /// Crystal corpus to read a record from.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// 0-based record index in the corpus.
    #[arg(long)]
    pub index: Option<usize>,
    /// Record id in the corpus.
    #[arg(long)]
    pub id: Option<String>,
    /// Whitespace- or comma-separated token ids to name and decode.
    #[arg(long)]
    pub tokens: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub tables: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct SynthFlags {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_sites: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tables: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Kind::Usage as u8) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let file = cli.config.as_deref();
    let result = match cli.command {
        Command::Tokenize(f) => commands::tokenize(file, f),
        Command::Train(f) => commands::train(file, f),
        Command::Generate(f) => commands::generate(file, f),
        Command::Evaluate(f) => commands::evaluate(file, f),
        Command::Inspect(f) => commands::inspect(file, f),
        Command::Synth(f) => commands::synth(file, f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind as u8)
        }
    }
}
