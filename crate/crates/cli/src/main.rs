//! `triadapt` command line: run experiments from a config file, export final
//! rank tables, and verify run records offline.
//!
//! Exit codes: 0 success, 1 usage or schema error, 2 numerical failure
//! during training, 3 verification mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use triadapt_core::experiment::{self, ExperimentConfig};
use triadapt_core::Error;

#[derive(Parser)]
#[command(name = "triadapt", version, about = "Triangular adaptive low-rank adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every seed of an experiment config and write run records.
    Run {
        /// Path to the TOML experiment config.
        config: PathBuf,
    },
    /// Export the final per-site rank table of a run record.
    #[command(name = "export-rank-table")]
    ExportRankTable {
        /// Path to a .record.json file.
        record: PathBuf,
        /// Directory for the exported tables (default: next to the record).
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-derive a record's bookkeeping and report any mismatch.
    Verify {
        /// Path to a .record.json file.
        record: PathBuf,
    },
}

const EXIT_SCHEMA: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numerical { .. } => EXIT_NUMERICAL,
        _ => EXIT_SCHEMA,
    }
}

fn run_command(config_path: &Path) -> Result<(), Error> {
    let config = ExperimentConfig::load(config_path)?;
    let out = experiment::run(&config)?;
    for record in &out.records {
        println!("record  {}", record.display());
    }
    println!("summary {}", out.summary.display());
    Ok(())
}

fn export_command(record: &Path, out_dir: Option<&PathBuf>) -> Result<(), Error> {
    let table = experiment::export_rank_table_files(record, out_dir.map(|p| p.as_path()))?;
    print!("{}", table.wide_tsv);
    Ok(())
}

fn verify_command(record: &Path) -> Result<bool, Error> {
    let report = experiment::verify(record)?;
    for check in &report.checks {
        let status = if check.passed { "pass" } else { "FAIL" };
        println!("{status}  {:<22} {}", check.name, check.detail);
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => run_command(config).map(|_| true),
        Command::ExportRankTable { record, out_dir } => {
            export_command(record, out_dir.as_ref()).map(|_| true)
        }
        Command::Verify { record } => verify_command(record),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
