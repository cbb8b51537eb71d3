use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use driftbench_cli::commands;

#[derive(Parser)]
#[command(name = "driftbench", version, about = "Continual-learning experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its artifacts.
    Run {
        config: PathBuf,
        /// Overwrite artifacts from an earlier run of the same config.
        #[arg(long)]
        force: bool,
    },
    /// Summarize stored runs as a metrics table, one row per directory.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Recompute drift trajectories from stored checkpoints and probe.
    Cka { dir: PathBuf },
    /// Check a config file and print its digest.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, force } => commands::cmd_run(&config, force),
        Command::Report { dirs } => commands::cmd_report(&dirs),
        Command::Cka { dir } => commands::cmd_cka(&dir),
        Command::Validate { config } => commands::cmd_validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
