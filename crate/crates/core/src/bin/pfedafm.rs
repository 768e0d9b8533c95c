//! `pfedafm run <config>` and `pfedafm sweep <config> --key K --values a,b,...`.
//!
//! Exit status: 0 on success, 1 for configuration or usage problems, 2 when a
//! run fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pfedafm::runner;
use pfedafm::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "pfedafm", version, about = "Federated learning simulator with adaptive feature mixing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    config: PathBuf,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed repeat of one configuration.
    Run(Common),
    /// Run once per value of one key.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
    },
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(common) => {
            let config = load(&common)?;
            runner::run(&config, common.force, &mut |s| println!("{}", s.line()))?;
        }
        Command::Sweep { common, key, values } => {
            let config = load(&common)?;
            let values: Vec<String> = values
                .into_iter()
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            runner::sweep(&config, &key, &values, common.force, &mut |v, s| {
                println!("{key} = {v}: {}", s.line())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
