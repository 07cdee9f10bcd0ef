//! `subprobe`: generate data, pre-train the toy encoder, train probes, run
//! sweeps, and analyze masks.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use subprobe_core::hard_concrete::Granularity;
use subprobe_core::harness::{Condition, EvalSplit, HarnessError, Task};
use subprobe_core::heads::ProbeMode;

/// A problem with the invocation rather than with the computation.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser)]
#[command(name = "subprobe", version, about = "Subnetwork probing on a toy transformer encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic corpus and write CoNLL-U and CoNLL-2003 files.
    GenData(GenDataArgs),
    /// Pre-train the encoder with masked language modeling.
    Pretrain(PretrainArgs),
    /// Train and evaluate one probe.
    Probe(ProbeArgs),
    /// Run a complexity (pareto) or regularization (lambda) sweep.
    Sweep(SweepArgs),
    /// Per-layer sparsity of a trained mask.
    Analyze(AnalyzeArgs),
}

/// Seed and config-file options shared by every command.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Run seed; overrides SUBPROBE_SEED and the config file.
    #[arg(long, env = "SUBPROBE_SEED")]
    pub seed: Option<u64>,
    /// Flat key=value file supplying defaults for flags not given.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Grammar file; the shipped grammar when omitted.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    /// Number of sentences [default: 10000].
    #[arg(long)]
    pub n: Option<usize>,
    /// Output directory for corpus.conllu and corpus.conll2003.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// CoNLL-U corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Encoder checkpoint to write; the log, manifest and JSON summary go
    /// next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// [default: 4]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Fraction of positions masked [default: 0.15].
    #[arg(long)]
    pub mask_prob: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

/// Corpus and weights a probe is trained on.
#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// CoNLL-U corpus (tokens, POS, dependencies).
    #[arg(long)]
    pub corpus: PathBuf,
    /// CoNLL-2003 file with NER tags for the same sentences; defaults to the
    /// corpus path with a .conll2003 extension.
    #[arg(long)]
    pub ner: Option<PathBuf>,
    /// Pre-trained encoder checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub task: Option<Task>,
}

/// Optimization settings; defaults follow the harness.
#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Final regularization strength [default: 1].
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.2]
    #[arg(long)]
    pub mask_lr: Option<f64>,
    /// Learning rate for everything except the mask [default: 5e-5].
    #[arg(long)]
    pub other_lr: Option<f64>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// dev or train [default: dev].
    #[arg(long)]
    pub eval_split: Option<EvalSplit>,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// [default: pretrained]
    #[arg(long)]
    pub condition: Option<Condition>,
    #[arg(long)]
    pub mode: Option<ProbeMode>,
    /// Subnetwork mask granularity, e.g. matrix, cols:4, neuron, rows:16,
    /// weight [default: neuron].
    #[arg(long)]
    pub granularity: Option<Granularity>,
    /// MLP-1 rank [default: 64].
    #[arg(long)]
    pub rank: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Pareto,
    Lambda,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated granularities (pareto) [default: full ladder].
    #[arg(long)]
    pub granularities: Option<String>,
    /// Comma-separated MLP-1 ranks (pareto) [default: 1,2,4,8,16,32,64].
    #[arg(long)]
    pub ranks: Option<String>,
    /// Comma-separated λ_max values (lambda) [default: 1,5,25,125].
    #[arg(long)]
    pub lambdas: Option<String>,
    /// Mask granularity for the lambda sweep [default: neuron].
    #[arg(long)]
    pub granularity: Option<Granularity>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Maximum concurrent runs [default: 1].
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Mask checkpoint written by `probe`.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() || matches!(e.downcast_ref::<HarnessError>(), Some(HarnessError::Config(_))) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Probe(a) => commands::probe(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Analyze(a) => commands::analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
