//! Command-line surface of the branched multi-task architecture search.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{
    cmd_enumerate, cmd_eval, cmd_expected_cost, cmd_export_dot, cmd_search, MetricsDocument, SearchOverrides,
};
pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "bmtas", version, about = "Branched multi-task architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search, retrain and write artifacts for every seed and lambda of a run config.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this resource weight.
        #[arg(long, allow_negative_numbers = true)]
        lambda: Option<f64>,
    },
    /// Expected structure cost and per-layer grouping distribution of architecture logits.
    ExpectedCost {
        /// JSON array `alpha[task][layer][candidate]`.
        #[arg(long)]
        alpha: PathBuf,
        /// Comma-separated per-layer operation costs; 1 per layer when omitted.
        #[arg(long, value_delimiter = ',')]
        unit_costs: Option<Vec<f64>>,
        /// Cross-check against enumeration of every joint routing.
        #[arg(long)]
        oracle: bool,
    },
    /// Count groupings and branching structures.
    Enumerate {
        #[arg(long)]
        tasks: usize,
        #[arg(long)]
        layers: usize,
        #[arg(long, value_delimiter = ',')]
        unit_costs: Option<Vec<f64>>,
    },
    /// Multi-task performance change of a model over a baseline, in percent.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Render a structure JSON file as Graphviz DOT.
    ExportDot {
        #[arg(long)]
        structure: PathBuf,
    },
}

/// Runs one command and returns what it prints to stdout.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Search {
            config,
            seed,
            out,
            lambda,
        } => cmd_search(&config, &SearchOverrides { seed, out, lambda }),
        Command::ExpectedCost {
            alpha,
            unit_costs,
            oracle,
        } => cmd_expected_cost(&alpha, unit_costs.as_deref(), oracle),
        Command::Enumerate {
            tasks,
            layers,
            unit_costs,
        } => cmd_enumerate(tasks, layers, unit_costs.as_deref()),
        Command::Eval { model, baseline } => cmd_eval(&model, &baseline),
        Command::ExportDot { structure } => cmd_export_dot(&structure),
    }
}
