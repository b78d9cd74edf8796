//! `mla`: convert, verify, fine-tune and size toy encoder-decoder models
//! with latent attention.
//!
//! Exit codes: 0 success, 1 verification or metric failure, 2 usage error,
//! 3 file-format error, 4 numerical error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mla_core::MlaError;

#[derive(Parser, Debug)]
#[command(name = "mla", version, about = "Latent-attention conversion toolkit")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Suppress human-readable summaries.
    #[arg(long, global = true)]
    quiet: bool,
    /// Machine-readable output (CSV or JSON lines, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a freshly initialized MHA checkpoint.
    Init(InitArgs),
    /// Write a synthetic dataset as JSON lines.
    Dataset(DatasetArgs),
    /// Convert an MHA checkpoint to latent attention.
    Convert(ConvertArgs),
    /// Compare two checkpoints and check incremental decoding.
    Verify(VerifyArgs),
    /// Fine-tune a checkpoint on a synthetic task.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a task's held-out split.
    Eval(EvalArgs),
    /// Sweep KV-cache memory over batch sizes and lengths.
    MemSweep(MemSweepArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint header.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 2)]
    encoder_layers: usize,
    #[arg(long, default_value_t = 2)]
    decoder_layers: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 128)]
    max_len: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Copy,
    Reverse,
}

#[derive(Args, Debug, Clone)]
struct TaskArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Copy)]
    task: TaskArg,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    min_len: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    /// Task vocabulary (defaults to the model's).
    #[arg(long)]
    task_vocab: Option<usize>,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PlacementArg {
    Full,
    Dso,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    FullCompression,
    Uniform,
    #[value(name = "2norm")]
    TwoNorm,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = PlacementArg::Dso)]
    placement: PlacementArg,
    #[arg(long, value_enum, default_value_t = StrategyArg::Uniform)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    /// Preserved frequency subspaces per head (default 1; 0 for full compression).
    #[arg(long)]
    preserve_per_head: Option<usize>,
    /// Calibration examples (JSON lines) for the 2norm strategy.
    #[arg(long)]
    calib: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    converted: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value_t = 10)]
    trials: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FreezeArg {
    /// DSO checkpoints freeze encoder and cross-attention; others train fully.
    Auto,
    Dso,
    None,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Global gradient-norm bound; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, value_enum, default_value_t = FreezeArg::Auto)]
    freeze: FreezeArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    task: TaskArgs,
    /// Exit 1 when held-out token accuracy is below this value.
    #[arg(long)]
    min_accuracy: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    WhisperSmall,
    Toy,
}

#[derive(Args, Debug)]
struct MemSweepArgs {
    #[arg(long, value_enum, default_value_t = PresetArg::WhisperSmall)]
    preset: PresetArg,
    #[arg(long, value_enum, default_value_t = PlacementArg::Full)]
    placement: PlacementArg,
    #[arg(long, default_value_t = 96)]
    latent_dim: usize,
    #[arg(long, default_value_t = 2)]
    preserve_per_head: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 4, 16, 64])]
    batches: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = [256u64, 512, 1024, 2048, 4096])]
    lengths: Vec<u64>,
    #[arg(long, default_value_t = 1500)]
    source_len: u64,
    #[arg(long, default_value_t = 2)]
    bytes_per_entry: u64,
    /// Flag rows whose cache bytes exceed this budget.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Mha,
    MlaFull,
    MlaPreserving,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Checkpoint to check; a fresh toy model is used when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Attention variant of the fresh model.
    #[arg(long, value_enum, default_value_t = VariantArg::Mha)]
    variant: VariantArg,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Examples in the probe batch.
    #[arg(long, default_value_t = 4)]
    batch: usize,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    input: PathBuf,
}

/// Command failure with its exit code.
#[derive(Debug)]
pub(crate) struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn metric(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<MlaError> for Failure {
    fn from(e: MlaError) -> Self {
        let code = match &e {
            MlaError::Argument(_) | MlaError::Config(_) => 2,
            MlaError::Format { .. } => 3,
            MlaError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
            MlaError::Io(_) => 3,
            MlaError::Numerical { .. } | MlaError::Training { .. } | MlaError::State(_) => 4,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        MlaError::Io(e).into()
    }
}

pub(crate) type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = commands::Context {
        seed: cli.seed,
        quiet: cli.quiet,
        out: cli.out.clone(),
    };
    let result = match cli.command {
        Command::Init(a) => commands::init(&ctx, a),
        Command::Dataset(a) => commands::dataset(&ctx, a),
        Command::Convert(a) => commands::convert(&ctx, a),
        Command::Verify(a) => commands::verify(&ctx, a),
        Command::Finetune(a) => commands::finetune(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::MemSweep(a) => commands::mem_sweep(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::Inspect(a) => commands::inspect(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
