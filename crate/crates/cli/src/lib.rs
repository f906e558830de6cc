//! Command-line front end for the fedgnn simulator.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod report;
pub mod run;

use clap::{Parser, Subcommand};

use crate::config::{parse_config, Options};
use crate::error::CliError;
use crate::report::Report;

#[derive(Debug, Parser)]
#[command(name = "fedgnn", version, about = "Federated GNN recommendation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full federated protocol and score the test split.
    #[command(allow_negative_numbers = true)]
    Train(Options),
    /// Score a saved checkpoint on the validation and test splits.
    #[command(allow_negative_numbers = true)]
    Eval(Options),
    /// Train over a grid of delta, lambda or m values.
    #[command(allow_negative_numbers = true)]
    Sweep {
        #[command(flatten)]
        options: Options,
        /// Axis `key=v1,v2,...` with key one of delta, lambda, m. Repeat for a product grid.
        #[arg(long)]
        grid: Vec<String>,
        /// Number of consecutive seeds per cell.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Every GNN variant with and without graph expansion.
    #[command(allow_negative_numbers = true)]
    Ablate {
        #[command(flatten)]
        options: Options,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

pub fn execute(command: &Command) -> Result<Report, CliError> {
    match command {
        Command::Train(o) => run::train(&parse_config(o)?),
        Command::Eval(o) => run::eval(&parse_config(o)?),
        Command::Sweep {
            options,
            grid,
            seeds,
        } => run::sweep(&parse_config(options)?, grid, *seeds),
        Command::Ablate { options, seeds } => run::ablate(&parse_config(options)?, *seeds),
    }
}
