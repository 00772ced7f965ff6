//! Command-line orchestration: ingest, profile, train-eval, inspect, sweep.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::CliError;
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "llmhg", version, about = "Hypergraph-enhanced sequential recommendation")]
pub struct Cli {
    /// Run configuration file (`key = value` per line).
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set epochs=20`. Repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and preprocess the dataset, print corpus statistics and write
    /// canonical dumps.
    Ingest {
        /// Print statistics only.
        #[arg(long)]
        stats_only: bool,
    },
    /// Build interest-angle profiles and per-user hypergraphs.
    Profile,
    /// Train and evaluate over all seeds, with a base-only comparison.
    TrainEval(TrainEvalArgs),
    /// Show one user's hypergraph with the weights of a trained run.
    Inspect {
        /// Run directory written by train-eval.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        user: String,
        /// Checkpoint seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sensitivity grid over `l_tru` and `beta`.
    Sweep {
        /// Grid axis, e.g. `l_tru=5,10,15`. Repeatable.
        #[arg(long = "grid", required = true, value_name = "KEY=V1,V2")]
        grid: Vec<String>,
    },
}

#[derive(Debug, Args)]
pub struct TrainEvalArgs {
    /// Hypergraph builder: llm, transition, contextual or intent.
    #[arg(long)]
    pub hypergraph: Option<String>,
    /// Train the sequence encoder alone.
    #[arg(long)]
    pub base_only: bool,
    /// Run a sensitivity grid instead, e.g. `--sweep l_tru=5,10,15`.
    #[arg(long, value_name = "KEY=V1,V2")]
    pub sweep: Vec<String>,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides;
    if let Command::TrainEval(a) = &cli.command {
        if let Some(h) = &a.hypergraph {
            overrides.push(format!("hypergraph={h}"));
        }
        if a.base_only {
            overrides.push("base_only=true".into());
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Ingest { stats_only } => commands::ingest(&cfg, stats_only),
        Command::Profile => commands::profile(&cfg),
        Command::TrainEval(a) if !a.sweep.is_empty() => commands::sweep(&cfg, &a.sweep),
        Command::TrainEval(_) => commands::train_eval(&cfg),
        Command::Inspect { run, user, seed } => commands::inspect(&run, &user, seed),
        Command::Sweep { grid } => commands::sweep(&cfg, &grid),
    }
}
