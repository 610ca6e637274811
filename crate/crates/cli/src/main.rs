use std::path::PathBuf;
use std::process::ExitCode;

use acfl::selection::Strategy;
use acfl_cli::commands::{self, default_out};
use acfl_cli::config::{experiment_from_document, lab_from_document, load_document};
use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acfl", version, about = "Auction-based clustered federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted keys take defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set selection.select_ratio=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one strategy and write its traces.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Run several strategies on shared seeds and summarize the differences.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated; defaults to all strategies.
        #[arg(long = "strategy", value_delimiter = ',')]
        strategies: Vec<Strategy>,
    },
    /// Check clustered SGD on a quadratic against the convergence envelope.
    ConvergenceLab {
        #[command(flatten)]
        common: Common,
    },
    /// Tabulate client sizes, label mixes, and TV distances.
    PartitionReport {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn overrides(&self, seed_key: &str, extra: Option<String>) -> Vec<String> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("{seed_key}={s}"));
        }
        if let Some(r) = self.rounds {
            o.push(format!("experiment.rounds={r}"));
        }
        o.extend(extra);
        o
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Experiment { common, strategy } => {
            let extra = strategy.map(|s| format!("experiment.strategy=\"{}\"", s.name()));
            let doc = load_document(common.config.as_deref(), &common.overrides("experiment.seed", extra))?;
            let cfg = experiment_from_document(&doc)?;
            let dir = common.out.unwrap_or_else(|| default_out("experiment"));
            let out = commands::experiment(&cfg, &dir)?;
            print!("{}", commands::experiment_summary(&cfg, &out));
            println!("wrote {}", dir.display());
        }
        Command::Compare { common, strategies } => {
            let doc = load_document(common.config.as_deref(), &common.overrides("experiment.seed", None))?;
            let cfg = experiment_from_document(&doc)?;
            let strategies = if strategies.is_empty() { Strategy::ALL.to_vec() } else { strategies };
            let dir = common.out.unwrap_or_else(|| default_out("compare"));
            let runs = commands::compare(&cfg, &strategies, &dir)?;
            print!("{}", commands::compare_summary(&runs));
            println!("wrote {}", dir.display());
        }
        Command::ConvergenceLab { common } => {
            let doc = load_document(common.config.as_deref(), &common.overrides("lab.seed", None))?;
            let cfg = lab_from_document(&doc)?;
            let dir = common.out.unwrap_or_else(|| default_out("convergence-lab"));
            let report = commands::convergence_lab(&cfg, &dir)?;
            print!("{}", commands::lab_summary(&report));
        }
        Command::PartitionReport { common } => {
            let doc = load_document(common.config.as_deref(), &common.overrides("experiment.seed", None))?;
            let cfg = experiment_from_document(&doc)?;
            let dir = common.out.unwrap_or_else(|| default_out("partition-report"));
            print!("{}", commands::partition_report(&cfg, &dir)?);
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
