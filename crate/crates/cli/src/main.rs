//! `fedsim`: runs FedAvg experiments described by JSON configs and writes
//! CSV results. See `docs/cli.md` for the config schema.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::ExperimentSpec;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "fedsim", version, about = "FedAvg experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment spec (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the config's `seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for grids (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every entry of `runs` for every seed.
    Run(Common),
    /// Rounds-to-target over the local-step grid `e_grid`.
    SweepE(Common),
    /// Rounds-to-target over the participation grid `k_grid`.
    SweepK(Common),
    /// Fixed-point gaps of the fixed-step counterexample.
    Counterexample(Common),
    /// Schedule and constant report for the configured runs.
    Validate(Common),
    /// Write the configured dataset to `<out>/dataset.csv`.
    GenData(Common),
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    let (common, f): (Common, fn(&ExperimentSpec, &Ctx) -> Result<(), CliError>) = match cmd {
        Command::Run(c) => (c, commands::run),
        Command::SweepE(c) => (c, commands::sweep_e),
        Command::SweepK(c) => (c, commands::sweep_k),
        Command::Counterexample(c) => (c, commands::counterexample),
        Command::Validate(c) => (c, commands::validate),
        Command::GenData(c) => (c, commands::gen_data),
    };
    let spec = ExperimentSpec::load(&common.config)?;
    let out = common
        .out
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be >= 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    f(
        &spec,
        &Ctx {
            out,
            seed: common.seed,
            pool,
        },
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSIM_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
