use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use cmdp_lab::config::ExperimentConfig;
use cmdp_lab::harness;

#[derive(Parser)]
#[command(
    name = "cmdp-lab",
    about = "Constrained-RL laboratory: primal-dual training runs, adjustment-epoch sweeps, and exact dual oracles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured (algorithm, seed) matrix and write CSV curves.
    Run {
        /// Path to the experiment JSON document.
        config: PathBuf,
    },
    /// Run the APDO adjustment-epoch sweep and write a comparison table.
    SweepKadj {
        /// Path to the experiment JSON document.
        config: PathBuf,
        /// Adjustment epochs to sweep, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Solve a tabular model exactly and print the constrained optimum.
    Oracle {
        /// Path to a tabular model JSON document.
        cmdp: PathBuf,
    },
}

fn load_config(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config `{}`", path.display()))?;
    ExperimentConfig::parse(&text)
        .with_context(|| format!("invalid config `{}`", path.display()))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            for path in harness::run_experiment(&cfg)? {
                println!("{}", path.display());
            }
        }
        Command::SweepKadj { config, values } => {
            let cfg = load_config(&config)?;
            for path in harness::sweep_kadj(&cfg, &values)? {
                println!("{}", path.display());
            }
        }
        Command::Oracle { cmdp } => {
            println!("{}", harness::oracle_report(&cmdp)?);
        }
    }
    Ok(())
}
