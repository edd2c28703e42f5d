//! `uniblend` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 file or data error, 3 failed
//! numerical check.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "uniblend", version, about = "Mask-guided illumination normalization")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Restore one image.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset and write a JSON report.
    Eval(EvalArgs),
    /// Compare every gradient with finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Image side; a multiple of 32.
    #[arg(long)]
    size: usize,
    #[arg(long)]
    seed: u64,
    /// Fixed number of shading blobs per image instead of a random count.
    #[arg(long)]
    blobs: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = uniblend::train::DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    no_saam: bool,
    #[arg(long)]
    no_context: bool,
    /// Loss weights `a1,a2,a3,lam` for the SSIM, gradient, perceptual and mask terms.
    #[arg(long, value_name = "a1,a2,a3,lam")]
    weights: Option<String>,
    /// Newline-delimited JSON, one object per step.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    context_channels: usize,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Soft mask as 8-bit PGM, `round(M * 255)`.
    #[arg(long)]
    dump_mask: Option<PathBuf>,
    /// Residual as PPM, `0.5 + R / 2` so that zero is mid grey.
    #[arg(long)]
    dump_residual: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Differentiate in f64 instead of f32.
    #[arg(long)]
    f64: bool,
}

/// Why a command stopped.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(uniblend::Error),
    Check(String),
}

impl From<uniblend::Error> for Failure {
    fn from(e: uniblend::Error) -> Self {
        Failure::Data(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}
