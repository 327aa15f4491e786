//! `ffdsplat`: simulate, reconstruct, evaluate and export dynamic CBCT runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit codes.
const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "ffdsplat", version, about = "Dynamic CBCT reconstruction with deformation-informed Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
pub(crate) struct Common {
    /// TOML file with keys of this command's config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any config key as `--key value` (kebab-case; nested keys by leaf name or dotted path).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub(crate) enum Command {
    /// Generate a synthetic projection set with ground truth.
    Simulate(Common),
    /// Fit the reference cloud and motion model to a projection set.
    Reconstruct(Common),
    /// Compare a run against the ground truth of its dataset.
    Evaluate(Common),
    /// Write volumes, DVFs and projection renders at chosen times.
    Export(Common),
    /// Run the built-in gradient, oracle and invariant checks.
    Selftest,
    /// Print the resolved configuration of a command as TOML.
    ShowConfig {
        #[arg(value_parser = ["simulate", "reconstruct", "evaluate", "export"])]
        command: String,
        #[command(flatten)]
        common: Common,
    },
}

pub enum Failure {
    Validation(String),
    Runtime(String),
    Selftest,
}

impl From<ffdsplat::Error> for Failure {
    fn from(e: ffdsplat::Error) -> Self {
        use ffdsplat::Error as E;
        match e {
            E::Config(_)
            | E::InvalidGeometry(_)
            | E::DimensionMismatch(_)
            | E::OutOfDomain { .. }
            | E::ViewOutOfRange { .. }
            | E::EmptySupport(_)
            | E::EmptyMask
            | E::Format { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Selftest) => ExitCode::from(EXIT_SELFTEST),
    }
}
