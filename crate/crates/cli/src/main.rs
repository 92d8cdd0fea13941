//! `egograph` command-line tool: dataset generation, cross-validated
//! training, critical-structure visualization and dataset statistics.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "egograph", version = manifest::VERSION, about = "Ego-convolutional graph classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// Alkanes (class 0) against alcohols (class 1).
    Alcohol,
    /// Symmetric (class 0) against asymmetric (class 1) methyl isomers.
    Isomer,
    /// Two stochastic Kronecker initiators, one per class.
    Kronecker,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset in benchmark text format.
    Generate {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inclusive carbon-count range `A..B` for compound datasets.
        #[arg(long, value_parser = commands::parse_range)]
        sizes: Option<(usize, usize)>,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Leave hydrogens out of compound graphs.
        #[arg(long)]
        heavy_atoms: bool,
        /// Kronecker power; graphs have `2^power` nodes.
        #[arg(long, default_value_t = 7)]
        power: usize,
    },
    /// Cross-validate a model and save every fold's weights.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Share one filter bank across all ego layers.
        #[arg(long)]
        tied: bool,
        /// Overrides the training seed of the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Backtrack one graph's critical structure and write it as DOT and CSV.
    Visualize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        graph: usize,
        #[arg(long)]
        out: PathBuf,
        /// Attention threshold; defaults to 1/(2N).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Print graph, class and degree statistics of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        /// Also fit a power law to the degree histogram.
        #[arg(long)]
        power_law: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate {
            kind,
            out,
            seed,
            sizes,
            per_class,
            heavy_atoms,
            power,
        } => commands::generate(commands::GenerateArgs {
            kind,
            out,
            seed,
            sizes,
            per_class,
            hydrogens: !heavy_atoms,
            power,
        }),
        Command::Train {
            data,
            config,
            out,
            folds,
            tied,
            seed,
        } => commands::train(&data, &config, &out, folds, tied, seed),
        Command::Visualize {
            model,
            data,
            graph,
            out,
            threshold,
        } => commands::visualize(&model, &data, graph, &out, threshold),
        Command::Stats { data, power_law } => commands::stats(&data, power_law),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
