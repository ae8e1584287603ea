//! Command-line front end: data ingestion, configuration resolution, and
//! the estimate/band/test/tune/simulate/diagnose workflows. Every command
//! is deterministic given (input file, config, seed) and writes its outputs
//! plus a meta.json carrying the resolved parameters and their hash.
//!
//! Exit codes: 0 ok, 1 numeric failure, 2 input error, 3 config error.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{CommonArgs, Resolved};

/// CLI failure wrapper mapping onto the documented exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration (flags or config file): exit code 3.
    Config(String),
    /// Library failure, classed as input (2) or numeric (1).
    Core(drband::Error),
}

impl CliError {
    pub fn config(msg: String) -> CliError {
        CliError::Config(msg)
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Core(e) => match e.class() {
                drband::ErrorClass::Input => 2,
                drband::ErrorClass::Numeric => 1,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<drband::Error> for CliError {
    fn from(e: drband::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(drband::Error::Io(e))
    }
}

#[derive(Parser)]
#[command(name = "drband", version)]
#[command(about = "Uniform inference for dose-response functions of a continuous treatment")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the dose-response curve and its derivative on a grid.
    Estimate,
    /// Multiplier-bootstrap uniform confidence band for g, g', or tau.
    Band,
    /// Uniform test of a null curve against the band.
    Test {
        /// Null curve: zero | <constant> | file:PATH (one value per grid point).
        #[arg(long, default_value = "zero")]
        null: String,
    },
    /// Bandwidth selection report (CV pilot plus the chosen selector).
    Tune,
    /// Monte Carlo experiments reproducing the reference tables at desk scale.
    Simulate {
        /// Preset: table1 | table2 | table3 | table4 | table5 | table6.
        #[arg(long, default_value = "table1")]
        preset: String,
        /// Restrict to one DGP: DGP0 | DGP1L | DGP1NL.
        #[arg(long)]
        dgp: Option<String>,
        /// Restrict to one sample size.
        #[arg(long)]
        n: Option<usize>,
        /// Restrict to one loss row, e.g. "average" or "q=0.45".
        #[arg(long = "loss-kind")]
        loss_kind: Option<String>,
        /// Monte Carlo replications per cell.
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Balancing-weight and sieve-basis diagnostics.
    Diagnose,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Band => "band",
            Command::Test { .. } => "test",
            Command::Tune => "tune",
            Command::Simulate { .. } => "simulate",
            Command::Diagnose => "diagnose",
        }
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(t) = threads.filter(|&t| t > 0) {
        // Ignore "already initialized": only the first call can win.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global();
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let resolved = Resolved::build(&cli.common)?;
    init_threads(resolved.threads);
    std::fs::create_dir_all(&resolved.out)?;
    match &cli.command {
        Command::Estimate => commands::cmd_estimate(&resolved),
        Command::Band => commands::cmd_band(&resolved),
        Command::Test { null } => commands::cmd_test(&resolved, null),
        Command::Tune => commands::cmd_tune(&resolved),
        Command::Simulate {
            preset,
            dgp,
            n,
            loss_kind,
            reps,
        } => commands::cmd_simulate(
            &resolved,
            preset,
            dgp.as_deref(),
            *n,
            loss_kind.as_deref(),
            *reps,
        ),
        Command::Diagnose => commands::cmd_diagnose(&resolved),
    }
}

fn main() {
    // Flag misuse is a configuration error (exit 3); help and version
    // requests keep clap's zero exit.
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            e.exit();
        }
        eprint!("{e}");
        std::process::exit(3);
    });
    let command = cli.command.name();
    if let Err(e) = run(&cli) {
        eprintln!("drband {command}: {e}");
        std::process::exit(e.exit_code());
    }
}

/// Output path inside the resolved output directory.
pub(crate) fn out_path(resolved: &Resolved, name: &str) -> PathBuf {
    resolved.out.join(name)
}
