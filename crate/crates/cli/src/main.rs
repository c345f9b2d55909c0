//! `evigp` command-line driver.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use evigp::GpError;

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "evigp", version, about = "Bayesian GP regression fitted by energetic variational inference")]
struct Cli {
    /// TOML experiment file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (overrides the config).
    #[arg(long, global = true, env = "EVIGP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model and write the fit artifact.
    Fit,
    /// Predict at query points from a saved fit.
    Predict {
        /// Fit artifact written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// CSV of query inputs with a header row.
        #[arg(long)]
        query: PathBuf,
        /// Destination CSV (default: predictions.csv next to the fit).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Replicated benchmark study; writes per-replication and summary CSVs.
    Benchmark,
    /// CV for nu, fit, interval-based term selection, CV again, refit.
    Select,
    /// Cross-validation curve for the shrinkage scale nu.
    CvNu,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().context("this command needs --config <file>")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Predict { fit, query, output } = &cli.command {
        init_threads(cli.threads)?;
        let output = output
            .clone()
            .unwrap_or_else(|| fit.parent().unwrap_or(Path::new(".")).join("predictions.csv"));
        return commands::predict(fit, query, &output);
    }
    let cfg = load_config(&cli)?;
    init_threads(cfg.threads)?;
    let out = commands::prepare_out(&cfg.out)?;
    let result = match cli.command {
        Command::Fit => commands::fit(&cfg, &out),
        Command::Benchmark => commands::benchmark(&cfg, &out),
        Command::Select => commands::select(&cfg, &out),
        Command::CvNu => commands::cv_nu(&cfg, &out),
        Command::Predict { .. } => unreachable!(),
    };
    if let Err(e) = &result {
        if exit_code(e) == 1 {
            let _ = std::fs::write(out.join("diagnostics.txt"), format!("{e:#}\n"));
        }
    }
    result
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<GpError>(), Some(GpError::Numerical(_) | GpError::InvalidState(_))));
    if numerical {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
