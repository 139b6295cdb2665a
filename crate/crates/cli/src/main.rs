//! `fkloopgas <command> --config <path> [--seed N] [--out DIR] [--workers K]`
//!
//! Flags override the matching config keys. Exit status: 0 on success,
//! 2 for configuration errors, 3 when the fugacity gate fails for a
//! command that needs it, 4 when an estimator does not converge (tables
//! computed so far are still written), 1 otherwise.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use env_logger::Env;

use crate::commands::{run, write_all, Command, Ctx, Failure};
use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "fkloopgas", version, about = "Feynman-Kac loop-gas experiments")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `out`, then `results`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(&cli.config).map_err(Failure::config)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(k) = cli.workers.or(cfg.workers) {
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().map_err(Failure::other)?;
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("results"));
    let mut ctx = Ctx::new(&cfg);
    let result = run(cli.command, &mut ctx);
    let written = write_all(&ctx, &out, cli.command).map_err(Failure::other)?;
    for path in written {
        println!("wrote {}", path.display());
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(Env::new().filter_or("FKLOOPGAS_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
