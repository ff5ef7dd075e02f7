mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use attnreg_core::ablation::Sweep;
use attnreg_core::RegulatorKind;
use clap::{Args, Parser, Subcommand};

/// Attention regulation on a toy cross-attention diffusion model.
#[derive(Debug, Parser)]
#[command(name = "attnreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one generation (and its unregulated twin) and write artifacts.
    Generate(GenerateArgs),
    /// Sweep one regulation setting over the dominance suite.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients on random instances.
    Gradcheck(GradcheckArgs),
    /// Check the scaling regulator's bound on random maps.
    Bounds(BoundsArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Comma-separated target words.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<String>>,
    /// `word=magnitude` logit bias; repeatable, replaces the configured list.
    #[arg(long)]
    pub dominance: Vec<String>,
    #[arg(long)]
    pub regulator: Option<RegulatorKind>,
    #[arg(long)]
    pub kappa_eos: Option<f64>,
    /// Overrides the config and `ATTNREG_SEED`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub sweep: Sweep,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// First instance seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 1.1)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.5)]
    pub kappa_eos: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bounds(a) => commands::bounds(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
