//! `hetfl`: partition data, run federated experiments, compare runs.
//!
//! Exit codes: 0 success, 2 configuration or schema error, 3 numerical
//! divergence, 4 I/O error.

mod commands;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "hetfl", version, about = "Heterogeneous federated learning experiments")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the device shards and public set a config would use.
    Partition {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output file for the partition JSON.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory, replacing the config's dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Master seed, replacing the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment and write its artifacts.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, env = "HETFL_OUT")]
        out: PathBuf,
        /// Master seed, replacing the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads for device training and transfers.
        #[arg(long, env = "HETFL_THREADS")]
        threads: Option<usize>,
        /// Ablation switch: no_prom, no_file, reinit_meta, ce_only,
        /// location_only or ce_mse. Repeatable.
        #[arg(long)]
        ablation: Vec<String>,
        /// Dataset directory, replacing the config's dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Compare finished runs: CSV, text table and accuracy plot.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Directory for report.csv, report.txt and accuracy.svg.
        #[arg(long, env = "HETFL_OUT")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    let result = match cli.command {
        Command::Partition { config, out, dataset, seed } => commands::partition(&config, &out, dataset, seed),
        Command::Run {
            config,
            out,
            seed,
            threads,
            ablation,
            dataset,
        } => commands::run(&config, &out, seed, threads, &ablation, dataset),
        Command::Report { runs, out } => report::write_report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
