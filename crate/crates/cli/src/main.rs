//! `pp`: generate synthetic models and corpora, calibrate, run the pruning
//! engine in any mode and analyze the resulting reports.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 bad input data
//! or file format, 4 internal invariant violation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pp_core::Error;

use crate::config::CorpusSource;

#[derive(Parser, Debug)]
#[command(name = "pp", version, about = "Probe pruning for transformer inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic model to a PPW1 weight file.
    GenModel(GenModelArgs),
    /// Write a seeded synthetic token stream to a PPT1 token file.
    GenCorpus(GenCorpusArgs),
    /// Collect historical statistics and write a PPH1 snapshot.
    Calibrate(CalibrateArgs),
    /// Run the engine over a corpus and write the report.
    Run(RunArgs),
    /// Turn run reports into CSV tables.
    Analyze(AnalyzeArgs),
    /// Print the analytic dense and probe cost for a model shape.
    Flops(FlopsArgs),
}

#[derive(Args, Debug, Default)]
struct ModelShape {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
}

#[derive(Args, Debug)]
struct GenModelArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Falls back to the config file, then PP_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    shape: ModelShape,
    #[arg(long)]
    outlier_fraction: Option<f32>,
    #[arg(long)]
    outlier_gain: Option<f32>,
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Model to sample from (`--source model`) or to take the vocabulary size from.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum)]
    source: Option<CorpusSource>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    topics: Option<usize>,
    /// Consecutive sequences per topic.
    #[arg(long)]
    segment: Option<usize>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_history: Option<PathBuf>,
    /// Sequences in the calibration batch.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct EngineFlags {
    #[arg(long, value_parser = parse_mode)]
    mode: Option<pp_core::engine::RunMode>,
    /// Model-wide pruning ratio.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    skip_layers: Option<usize>,
    #[arg(long)]
    attention_ratio: Option<f64>,
    #[arg(long)]
    mlp_ratio: Option<f64>,
    /// Fraction of samples in the probe.
    #[arg(long)]
    probe_batch: Option<f64>,
    /// Fraction of tokens in the probe.
    #[arg(long)]
    probe_seq: Option<f64>,
    #[arg(long, value_enum)]
    selection: Option<Selection>,
    #[arg(long)]
    parallel_offset: Option<usize>,
    /// importance_scaled, probe_only, history_only or fixed_ratio:<alpha>.
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<pp_core::history::FusionMode>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<pp_core::metric::MetricKind>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    record_traces: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Selection {
    Residual,
    PostLayernorm,
}

fn parse_mode(s: &str) -> Result<pp_core::engine::RunMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fusion(s: &str) -> Result<pp_core::history::FusionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<pp_core::metric::MetricKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus whose first batch seeds the history.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// PPH1 snapshot to start from instead of calibrating.
    #[arg(long)]
    history: Option<PathBuf>,
    /// JSON-lines report output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Aggregate JSON output (also printed to stdout).
    #[arg(long)]
    aggregate: Option<PathBuf>,
    /// Report of another run to compute per-block Jaccard overlap against.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineFlags,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    max_batches: Option<usize>,
    #[arg(long)]
    calibration_batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnalyzeKind {
    Jaccard,
    Prr,
    Flops,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    kind: AnalyzeKind,
    /// jaccard: oracle, pp[, fixed] reports. flops: any reports. prr: JSON
    /// files of {label, perf_dense, perf_pruned, runtime_dense, runtime_pruned}.
    #[arg(long, num_args = 1..)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    perf_dense: Option<f64>,
    #[arg(long)]
    perf_pruned: Option<f64>,
    #[arg(long)]
    runtime_dense: Option<f64>,
    #[arg(long)]
    runtime_pruned: Option<f64>,
    #[arg(long, default_value = "pp")]
    label: String,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    shape: ModelShape,
    /// Use LLaMA-2-7B block shapes.
    #[arg(long)]
    llama2_7b: bool,
    #[arg(long, default_value_t = 20)]
    batch: usize,
    #[arg(long, default_value_t = 1024)]
    seq: usize,
    #[arg(long)]
    probe_batch: Option<f64>,
    #[arg(long)]
    probe_seq: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Value(_) | Error::Precondition(_)) => 3,
        Some(Error::Shape(_)) | None => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Run(a) => commands::run(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Flops(a) => commands::flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
