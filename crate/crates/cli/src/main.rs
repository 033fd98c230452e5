use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ngd_cli::{emit_plots, run_from_path, CliError};

#[derive(Parser)]
#[command(name = "ngd", about = "Natural-gradient training experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; replaces the list in the configuration.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory; replaces the one in the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Render SVG line charts of CSV artifacts.
    Plot {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seeds, out, workers } => run_from_path(&config, seeds, out, workers).map(|report| {
            println!("wrote {} step files and {}", report.step_files.len(), report.summary.display());
        }),
        Command::Plot { inputs, out } => emit_plots(&inputs, &out).map(|written| {
            for p in written {
                println!("{}", p.display());
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.record());
    ExitCode::from(e.exit_code() as u8)
}
