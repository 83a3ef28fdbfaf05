//! `ecosim`: runs stories, trains and fits them, and writes CSV results.
//!
//! Every CSV starts with a `# schema=<name>/<version>` line, then a header.
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ecosim", version, about = "Simulate, train and fit recommender-ecosystem stories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories of a story and write them with a summary.
    Simulate(Common),
    /// Train the slate policy with REINFORCE and write learning curves.
    TrainReinforce(Common),
    /// Fit the latent-satisfaction story with Monte Carlo EM.
    FitEm(Common),
    /// Compare social welfare across provider boost caps.
    EcosystemSweep(Common),
}

/// Flags shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Story to use: count, walk, bandit, porl, latent_sat or ecosystem.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent runs (seeds); for the ecosystem, the population batch.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Overrides the story horizon.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides one config key; repeatable. Keys may be qualified as section.key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Config file of `key = value` lines with `[section]` headers.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub dump_config: bool,
    /// Add wall-clock columns to per-iteration outputs.
    #[arg(long)]
    pub timing: bool,
    /// Skip per-variable trajectory CSVs (simulate only).
    #[arg(long)]
    pub no_trajectory: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => commands::simulate(&c),
        Command::TrainReinforce(c) => commands::train_reinforce(&c),
        Command::FitEm(c) => commands::fit_em(&c),
        Command::EcosystemSweep(c) => commands::ecosystem_sweep(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let config = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<ecosim::Error>(), Some(ecosim::Error::Config(_))));
            eprintln!("error: {e:#}");
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
