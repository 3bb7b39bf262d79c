//! `hscope` command-line interface.
//!
//! Exit codes: 0 success (including `--help`), 1 usage or validation error,
//! 2 when a check or suite reports a failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "hscope",
    version,
    about = "Hybrid-scope point-cloud encoder: generation, encoding, checks, sweeps and pose metrics"
)]
pub struct Cli {
    /// Seed for every random choice, including parameter init (overrides `seed` in --config)
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Encoder architecture file (`key = value` lines); the built-in default when absent
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output file (gen, encode, eval) or directory (everything else)
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Suppress the one-line summary
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample points on a synthetic shape and save them as PLY or XYZ
    Gen(GenArgs),
    /// Run the encoder on a point cloud and write per-point features
    Encode(EncodeArgs),
    /// Compare analytic gradients of the full model with finite differences
    Gradcheck(GradcheckArgs),
    /// Train the up-axis regression toy task
    Train(TrainArgs),
    /// Error of the full model and the plain-GC ablation versus outlier ratio
    NoiseSweep(NoiseSweepArgs),
    /// Error (and optionally forward time) versus neighbor count
    NeighborSweep(NeighborSweepArgs),
    /// Run the invariance suite on the configured encoder
    Invariance,
    /// Score pose records and print the metrics table
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// sphere, box, cylinder, mug or laptop
    #[arg(long, default_value = "sphere")]
    pub shape: String,
    /// Number of points
    #[arg(long, default_value_t = 1028, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    /// Input cloud (.ply, anything else is read as XYZ text)
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Parameter checkpoint written by `train`; fresh init from --seed when absent
    #[arg(long, value_name = "PATH")]
    pub params: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Coordinates checked per parameter group
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Points in the test cloud; the smallest the encoder accepts when absent
    #[arg(long)]
    pub points: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct TaskArgs {
    /// Points per sample
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 50)]
    pub n_test: usize,
    /// Largest tilt of the up axis away from +z, in degrees
    #[arg(long, default_value_t = 60.0)]
    pub max_tilt: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Args, Debug)]
pub struct NoiseSweepArgs {
    /// Comma-separated outlier ratios, strictly increasing
    #[arg(long, default_value = "0,0.1,0.2,0.3,0.4", value_delimiter = ',')]
    pub ratios: Vec<f64>,
    /// Independent experiment seeds
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Args, Debug)]
pub struct NeighborSweepArgs {
    /// m_rff, m_orl or m_both
    #[arg(long, default_value = "m_both")]
    pub variable: String,
    /// Comma-separated neighbor counts, strictly increasing
    #[arg(long, default_value = "3,5,10,20", value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    /// Also time forward passes (written to a separate file, not reproducible)
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// JSON-lines pose records
    #[arg(long, value_name = "PATH")]
    pub records: PathBuf,
    /// Monte-Carlo samples per IoU estimate
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
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
    match commands::run(&cli) {
        Ok(commands::Outcome::Ok) => ExitCode::SUCCESS,
        Ok(commands::Outcome::CheckFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
