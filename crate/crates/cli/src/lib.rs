//! Command-line front end of the `idxcover` engine.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Status;
use crate::config::Layers;
use crate::error::CliError;
use crate::output::Run;

#[derive(Debug, Parser)]
#[command(name = "idxcover", version, about = "Index insurance demand, solvency and hybrid design")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Descriptive statistics of the claims table.
    Describe(Common),
    /// Fit the four payout models and report their metrics.
    Fit(Common),
    /// Calibrate the premium and the risk-aversion law.
    Calibrate(Common),
    /// Demand sweeps over delay, loading and mean aversion.
    Demand(Common),
    /// Minimum loading, minimum portfolio sizes and feasibility checks.
    Solvency(Common),
    /// Hybrid index/indemnity design.
    Hybrid(Common),
    /// Monte Carlo ruin probability.
    Simulate(Common),
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// TOML scenario file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one value, e.g. `--set solvency.eps=0.01`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub sets: Vec<String>,
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::Describe(c) => ("describe", c),
            Command::Fit(c) => ("fit", c),
            Command::Calibrate(c) => ("calibrate", c),
            Command::Demand(c) => ("demand", c),
            Command::Solvency(c) => ("solvency", c),
            Command::Hybrid(c) => ("hybrid", c),
            Command::Simulate(c) => ("simulate", c),
        }
    }
}

/// Runs one command with the given environment; returns the exit code.
pub fn execute(cli: &Cli, env: Vec<(String, String)>) -> Result<Status, CliError> {
    let (name, common) = cli.command.parts();
    let layers = Layers {
        file: common.config.clone(),
        env,
        sets: common.sets.clone(),
        seed: common.seed,
        out: common.out.clone(),
    };
    let resolved = layers.resolve()?;
    let mut run = Run::new(name, resolved.config, resolved.overrides)?;
    let status = match cli.command {
        Command::Describe(_) => commands::describe_cmd(&mut run),
        Command::Fit(_) => commands::fit_cmd(&mut run),
        Command::Calibrate(_) => commands::calibrate_cmd(&mut run),
        Command::Demand(_) => commands::demand_cmd(&mut run),
        Command::Solvency(_) => commands::solvency_cmd(&mut run),
        Command::Hybrid(_) => commands::hybrid_cmd(&mut run),
        Command::Simulate(_) => commands::simulate_cmd(&mut run),
    }?;
    run.finish(match status {
        Status::Ok => "ok",
        Status::Infeasible(_) => "infeasible",
    })?;
    Ok(status)
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, Layers::from_process_env()) {
        Ok(Status::Ok) => 0,
        Ok(Status::Infeasible(msg)) => {
            eprintln!("infeasible: {msg}");
            4
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
