//! Batch front end for `gexp-core`: reads an experiment config, runs the
//! requested operations and writes JSON/CSV reports.
//!
//! Exit codes: 0 when every check passes, 1 when a check fails, 2 on
//! configuration or runtime errors.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use gexp_core::exec;

use crate::commands::Session;
use crate::config::ExperimentConfig;
use crate::output::OutDir;

#[derive(Debug, Parser)]
#[command(name = "gexp", version, about = "Sublinear expectation experiments under volatility uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Monte Carlo seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Time-step halvings in the price refinement ladder.
    #[arg(long, global = true, default_value_t = 0)]
    pub refine: usize,
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// E0(X) from the lattice and the PDE, with the closed form if given.
    Price,
    /// Superhedge from the conservative price; writes hedge.json and shortfall.csv.
    Hedge,
    /// Y = E - int Z dB + K along paths; writes decomposition.csv and bsde.json.
    Decompose,
    /// Price, decomposition, hedge and replicability checks in one report.
    Verify,
    /// Pastes the configured controls and checks containment.
    Paste,
    /// Pathwise integral of B against B at several oscillation levels.
    Integrate,
    /// The operations listed in the config.
    Run,
    /// The acceptance suite.
    Acceptance {
        /// Criteria to run (1-10); all when empty.
        #[arg(long, value_delimiter = ',')]
        only: Vec<usize>,
    },
}

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

pub fn run(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        exec::init_threads(n)?;
    }
    if cli.sequential {
        exec::set_mode(exec::Mode::Sequential);
    }
    if let Command::Acceptance { only } = &cli.command {
        return commands::acceptance(only);
    }
    let Some(path) = &cli.config else {
        bail!("--config is required");
    };
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_seed(cli.seed);
    let dir = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
    let session = Session { cfg, out: OutDir::create(&dir)?, refine: cli.refine };
    match cli.command {
        Command::Price => commands::price(&session),
        Command::Hedge => commands::hedge(&session),
        Command::Decompose => commands::decompose(&session),
        Command::Verify => commands::verify(&session),
        Command::Paste => commands::paste_cmd(&session),
        Command::Integrate => commands::integrate(&session),
        Command::Run => commands::run_operations(&session),
        Command::Acceptance { .. } => unreachable!(),
    }
}

/// Parses `args`, runs and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
        }
    };
    match run(&cli) {
        Ok(true) => EXIT_PASS,
        Ok(false) => EXIT_FAIL,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}
