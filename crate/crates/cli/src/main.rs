use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mechemu_cli::commands::{self, Mode};
use mechemu_cli::config::{RunConfig, Setup};
use mechemu_cli::report::cmd_report;
use mechemu_cli::CliError;

/// Emulator-accelerated Bayesian calibration of urban drainage models.
#[derive(Parser)]
#[command(name = "mechemu", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the run directory from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the initial Halton design and estimate auxiliary parameters.
    Design {
        #[command(flatten)]
        run: RunArgs,
        /// Number of design points; defaults to half the budget.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Sample the posterior with the emulator or the simulator in the likelihood.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "emulator")]
        mode: Mode,
    },
    /// Run the full design refinement loop.
    Refine {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Cross-match distance between two posterior sample files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Points per sample used for matching.
        #[arg(long, default_value_t = mechemu_core::refinement::DEFAULT_SUBSAMPLE)]
        subsample: usize,
    },
    /// Write report.md and figures for a run directory.
    Report { dir: PathBuf },
    /// Time conditioning, emulation and likelihood evaluation.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
        sizes: Vec<usize>,
        /// Query points per design size for the joint conditioning timing.
        #[arg(long, default_value_t = 3)]
        queries: usize,
    },
}

fn setup(run: RunArgs) -> Result<Setup, CliError> {
    let (config, base) = RunConfig::load(&run.config)?;
    Setup::new(config, base, run.seed, run.out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Design { run, size } => commands::cmd_design(&setup(run)?, size).map(drop),
        Command::Infer { run, mode } => commands::cmd_infer(&setup(run)?, mode).map(drop),
        Command::Refine { run } => commands::cmd_refine(&setup(run)?).map(drop),
        Command::Compare { a, b, seed, subsample } => commands::cmd_compare(&a, &b, seed, subsample).map(drop),
        Command::Report { dir } => cmd_report(&dir).map(drop),
        Command::Bench { run, sizes, queries } => commands::cmd_bench(&setup(run)?, &sizes, queries).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
