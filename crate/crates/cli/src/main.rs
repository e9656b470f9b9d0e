//! `tats`: spectral alignment analysis and text-augmented training from the
//! command line.

mod commands;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use input::{DataArgs, Invalid};

#[derive(Parser, Debug)]
#[command(name = "tats", version, about = "Text-augmented time series analysis and training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Series and text spectra with the top text frequencies matched to
    /// series peaks.
    AnalyzeCtr(AnalyzeCtrArgs),
    /// Wasserstein distance between text and series spectra, against
    /// timestamp-shuffled copies.
    TtWasserstein(TtWassersteinArgs),
    /// Runs the (pred_len x seed x mode) training grid.
    Train(TrainArgs),
    /// Error metrics of a prediction table against a target table.
    Evaluate(EvaluateArgs),
    /// Trains an imputer and fills the missing cells of a series.
    Impute(ImputeArgs),
    /// Feature-hashing embeddings for a text column.
    EmbedHash(EmbedHashArgs),
    /// Writes the hidden-driver synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct AnalyzeCtrArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of text frequencies to overlay.
    #[arg(long, default_value_t = 4)]
    top: usize,
    #[arg(long, default_value_t = 2)]
    nms_radius: usize,
    /// Lag horizon of the text spectrum [default: min(T-1, T/2)].
    #[arg(long)]
    max_lag: Option<usize>,
    /// Series peaks below this fraction of the strongest one are ignored.
    #[arg(long, default_value_t = 0.1)]
    min_peak_ratio: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TtWassersteinArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of shuffle permutations.
    #[arg(long, default_value_t = 10)]
    shuffles: u64,
    /// First shuffle seed; permutation i uses seed + i.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    max_lag: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TaskArg {
    Forecast,
    Impute,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModelArg {
    Linear,
    Dlinear,
    Mlp,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MixingArg {
    Shared,
    Mixing,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModeArg {
    Tats,
    NumericalOnly,
    TextShuffle,
    TextOnly1d,
}

/// Model and optimizer settings shared by `train` and `impute`.
#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Mlp)]
    model: ModelArg,
    /// Linear/DLinear weight layout across channels.
    #[arg(long, value_enum, default_value_t = MixingArg::Mixing)]
    mixing: MixingArg,
    /// DLinear moving-average kernel (odd) [default: min(25, seq_len), made odd].
    #[arg(long)]
    kernel: Option<usize>,
    /// MLP hidden width.
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    /// Dropout of the MLP backbone and the projector.
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 24)]
    seq_len: usize,
    /// Width of the projected text channels; 0 disables text.
    #[arg(long, default_value_t = 12)]
    d_mapped: usize,
    /// Skip instance normalization of the series channels.
    #[arg(long)]
    no_norm: bool,
    /// Learning rate of the backbone.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Learning rate of the projector.
    #[arg(long, default_value_t = 0.01)]
    lr2: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = TaskArg::Forecast)]
    task: TaskArg,
    /// Comma-separated forecast horizons.
    #[arg(long, value_delimiter = ',', default_values_t = [6, 8, 10, 12])]
    pred_len: Vec<usize>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',', default_values_t = [1])]
    seeds: Vec<u64>,
    /// Comma-separated modes to run.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModeArg::Tats, ModeArg::NumericalOnly])]
    modes: Vec<ModeArg>,
    /// Share of cells hidden for the imputation task.
    #[arg(long, default_value_t = 0.25)]
    missing_ratio: f64,
    /// Grid cells trained in parallel [default: all cores].
    #[arg(long, env = "TATS_JOBS")]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Prediction table (CSV with a header; a time column is ignored).
    #[arg(long)]
    pred: PathBuf,
    /// Target table with the same shape.
    #[arg(long)]
    target: PathBuf,
    /// Optional 0/1 table; only cells marked 1 are scored.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// 0/1 table marking observed cells with 1. Without it a random mask is
    /// drawn and the filled cells are scored against the hidden values.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    missing_ratio: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Where to write the filled series as CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedHashArgs {
    /// CSV holding the text column.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    text_col: String,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding output; `.csv` writes CSV, anything else TSEMB1.
    #[arg(long)]
    emb_out: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Series length (at least 200).
    #[arg(long, default_value_t = 2000)]
    t: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Series output CSV (columns t, x).
    #[arg(long)]
    csv_out: PathBuf,
    /// Embedding output; `.csv` writes CSV, anything else TSEMB1.
    #[arg(long)]
    emb_out: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::AnalyzeCtr(a) => commands::analyze_ctr(a),
        Command::TtWasserstein(a) => commands::tt_wasserstein(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Impute(a) => commands::impute(a),
        Command::EmbedHash(a) => commands::embed_hash(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for bad input, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Invalid>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<tats_core::Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
    }
    1
}
