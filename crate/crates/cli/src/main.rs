//! `roadfiber` command line: simulate, calibrate, detect, track,
//! characterize and evaluate.
//!
//! Exit codes: 0 on success, 2 on configuration errors, 3 on data errors.

mod config;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Resolver;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] roadfiber::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(e) if e.is_config() => 2,
            CliError::Pipeline(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "roadfiber", version, about = "Traffic monitoring from roadside fiber DAS recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed; overrides the scenario seed. Stages without randomness ignore it.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for outputs, and for inputs without a configured path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a calibration drive and a traffic recording with ground truth.
    Simulate(Common),
    /// Calibrate channels from a driving test: clock sync, positions, transmissibility.
    Calibrate(Common),
    /// Detect vehicle arrivals on every calibrated channel.
    Detect(Common),
    /// Track vehicles across channels.
    Track(Common),
    /// Estimate wheelbase and weight of tracked vehicles.
    Characterize(Common),
    /// Score the pipeline on simulated scenarios.
    Eval(Common),
}

fn run(command: Command) -> Result<(), CliError> {
    let (Command::Simulate(common)
    | Command::Calibrate(common)
    | Command::Detect(common)
    | Command::Track(common)
    | Command::Characterize(common)
    | Command::Eval(common)) = &command;
    let (cfg, base) = config::load(common.config.as_deref())?;
    let out: &Path = &common.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
    let paths = Resolver { base: &base, out };
    match command {
        Command::Simulate(_) => stages::simulate(&cfg, common.seed, out),
        Command::Calibrate(_) => stages::calibrate_stage(&cfg, &paths, out),
        Command::Detect(_) => stages::detect(&cfg, &paths, out),
        Command::Track(_) => stages::track(&cfg, &paths, out),
        Command::Characterize(_) => stages::characterize(&cfg, &paths, out),
        Command::Eval(_) => stages::eval(&cfg, common.seed, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("roadfiber: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
