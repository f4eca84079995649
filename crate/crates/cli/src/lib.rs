//! `attnlab` command-line driver.
//!
//! Every command writes its outputs plus a `manifest.json` into `--out-dir`.
//! `attnlab replay --manifest <file> --out-dir <dir>` re-runs a recorded
//! command and checks each output hash. Exit codes: 0 success, 1 usage
//! error, 2 data or format error (including a replay mismatch).

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{EvalSettings, FileConfig, DEFAULT_COT_BUDGET};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "attnlab",
    version,
    about = "Attention intervention experiments on a small transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a token corpus or on a freshly generated synthetic one.
    Train(TrainArgs),
    /// Greedy generation from a text prompt.
    Generate(GenerateArgs),
    /// Export attention heatmaps for one sequence.
    AttnDump(DumpArgs),
    /// Export heatmaps under an intervention pipeline, with diffs and perplexities.
    Intervene(InterveneArgs),
    /// Early-answer and chain-of-thought evaluation with summary reports.
    Eval(EvalArgs),
    /// Stand-alone report emitters.
    Report(ReportArgs),
    /// Re-run a manifest into a new directory and verify every output hash.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// JSON file with optional `model`, `train`, `dataset` and `eval` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// JSON-lines token corpus; a synthetic corpus is generated when absent.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Start from these weights instead of a fresh init.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Seed for init, batch sampling and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the synthetic dataset.
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Prepend the BOS token to the prompt.
    #[arg(long)]
    pub bos: bool,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
    /// Intervention spec file (JSON array).
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Text to tokenize byte by byte.
    #[arg(long, conflicts_with = "tokens", required_unless_present = "tokens")]
    pub text: Option<String>,
    /// JSON array of token ids.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Prepend the BOS token to `--text`.
    #[arg(long)]
    pub bos: bool,
    /// Layers to export, e.g. `0,2-3`; all layers when absent.
    #[arg(long)]
    pub layers: Option<String>,
    /// Export per-head matrices instead of layer means.
    #[arg(long, conflicts_with = "capture_mean")]
    pub capture_heads: bool,
    /// Export layer means (the default).
    #[arg(long)]
    pub capture_mean: bool,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub spec: PathBuf,
    /// Prompt length for specs that do not fix one; defaults to the whole input.
    #[arg(long)]
    pub prompt_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub weights: PathBuf,
    /// Items file (JSON lines); generated from the dataset config when absent.
    #[arg(long)]
    pub items: Option<PathBuf>,
    /// Spec file for the intervened CoT run.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Seed of the synthetic dataset.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_items: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(subcommand)]
    pub kind: ReportKind,
}

#[derive(Debug, Subcommand)]
pub enum ReportKind {
    /// Corpus frequency vs absorbed attention per token.
    Anchors(AnchorArgs),
    /// Signed difference map of two heatmap CSVs.
    Diff(DiffArgs),
    /// Summary tables from items and outcome files.
    Summary(SummaryArgs),
}

#[derive(Debug, Args)]
pub struct AnchorArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Layer whose head-averaged attention is measured.
    #[arg(long)]
    pub layers: String,
    /// Number of corpus sequences to capture.
    #[arg(long, default_value_t = 32)]
    pub max_seqs: usize,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub items: PathBuf,
    /// Outcome files (JSON lines); repeat the flag for several modes.
    #[arg(long, required = true)]
    pub outcomes: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Messages go to stdout/stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let recorded: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match commands::dispatch(cli.command, &recorded) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
