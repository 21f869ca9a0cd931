use std::path::PathBuf;

use advsr_cli::commands;
use advsr_cli::{Experiment, ExperimentConfig, Phase};
use anyhow::Result;
use clap::{Parser, Subcommand};

/// Adversarial super-resolution experiments.
#[derive(Debug, Parser)]
#[command(name = "advsr", version)]
struct Cli {
    /// Experiment config (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory, overriding the config's `eval.run_dir`. For `report`,
    /// the directory that receives report.md.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the train, val and test splits.
    GenData,
    /// Train one phase.
    Train {
        #[arg(long)]
        phase: Phase,
    },
    /// Evaluate an SR checkpoint, or every trained SR phase.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one AdvSR model per loss ratio.
    SweepR {
        /// Comma-separated ratios; the config grid when omitted.
        #[arg(long, value_delimiter = ',')]
        r_list: Option<Vec<f64>>,
    },
    /// Combine the evaluations of several run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn experiment(cli: &Cli) -> Result<Experiment> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut cfg = ExperimentConfig::default();
            if let Ok(v) = std::env::var(advsr_cli::config::SEED_ENV) {
                cfg.data.seed = v.trim().parse()?;
            }
            cfg
        }
    };
    Experiment::new(config, cli.out.clone())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData => {
            commands::gen_data(&experiment(&cli)?)?;
        }
        Command::Train { phase } => {
            commands::train(&experiment(&cli)?, *phase)?;
        }
        Command::Eval { checkpoint } => {
            commands::eval(&experiment(&cli)?, checkpoint.as_deref())?;
        }
        Command::SweepR { r_list } => {
            let exp = experiment(&cli)?;
            let rows = commands::sweep_r(&exp, r_list.as_deref())?;
            print!("{}", commands::summary_csv(&rows));
        }
        Command::Report { runs } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let path = commands::report(runs, &out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}
