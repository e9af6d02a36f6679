//! `msgan`: generate images, optimize weight files, count complexity,
//! benchmark and self-check.
//!
//! Results go to stdout, diagnostics to stderr. Every run writes a JSON
//! manifest (see `--manifest`).

mod commands;
mod config_file;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "msgan", version, about = "Wavelet-domain mobile style generator toolkit")]
pub struct Cli {
    /// Where to write the run manifest. Defaults depend on the command.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write randomly initialized weights for a config.
    Init(InitArgs),
    /// Render images to PNG.
    Generate(GenerateArgs),
    /// Fuse demodulation and fold constants, then verify the result.
    Optimize(OptimizeArgs),
    /// Count parameters and multiply-accumulates.
    Count(CountArgs),
    /// Time forward passes.
    Bench(BenchArgs),
    /// Run the numerical self-check suites.
    Verify(VerifyArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct InitArgs {
    /// TOML config file or preset name.
    #[arg(long)]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Expected config; generation fails if the weights were built for
    /// a different one.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub weights: PathBuf,
    /// Image `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also write the image reconstructed from every head.
    #[arg(long)]
    pub pyramid: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub weights_in: PathBuf,
    #[arg(long)]
    pub weights_out: PathBuf,
    #[arg(long, default_value_t = msgan_core::optimize::DEFAULT_VERIFY_SAMPLES)]
    pub verify_samples: usize,
    /// Maximum tolerated absolute output divergence.
    #[arg(long, default_value_t = msgan_core::optimize::DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long)]
    pub config: String,
    /// Second config; adds ratio columns (first / second).
    #[arg(long)]
    pub compare: Option<String>,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Per-layer breakdown.
    #[arg(long)]
    pub detailed: bool,
    #[arg(long)]
    pub include_mapping: bool,
    #[arg(long)]
    pub no_bias: bool,
    /// Leave modulation and demodulation multiplies out of the MAC count.
    #[arg(long)]
    pub no_modulation: bool,
    /// Count trainable demodulation as already fused.
    #[arg(long)]
    pub demod_fused: bool,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long, default_value_t = 21)]
    pub iters: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Time the weights against their optimized form.
    #[arg(long)]
    pub fused_vs_unfused: bool,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Wavelet,
    Modconv,
    Fusion,
    Losses,
    All,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    pub suite: SuiteArg,
    /// Weights for the fusion suite; random mobile weights otherwise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Previously optimized weights to check against `--weights`.
    #[arg(long, requires = "weights")]
    pub fused: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest_file: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match commands::run(cli, argv[1..].to_vec()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
