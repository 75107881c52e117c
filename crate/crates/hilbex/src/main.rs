use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hilbex::cli_io::{run_scenario, RunOptions, Scenario};

#[derive(Parser)]
#[command(
    name = "hilbex",
    version,
    about = "Builds and checks a truncated multiscale expansion of the scaled Boltzmann equation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the scenario.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker cap; falls back to HILBEX_THREADS.
        #[arg(long)]
        threads: Option<usize>,
        /// Parse and validate the scenario, then stop.
        #[arg(long)]
        validate_only: bool,
        /// Print stage progress to stderr.
        #[arg(short, long)]
        verbose: bool,
    },
}

fn main() -> ExitCode {
    let Command::Run {
        config,
        out,
        threads,
        validate_only,
        verbose,
    } = Cli::parse().command;
    let scenario = match Scenario::load(&config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if validate_only {
        println!("{}: valid", scenario.name);
        return ExitCode::SUCCESS;
    }
    let opts = RunOptions {
        out: out.as_deref(),
        threads,
        verbose,
    };
    match run_scenario(&scenario, opts) {
        Ok(rec) => match rec.failed() {
            Some(s) => {
                eprintln!("error: stage {} failed: {:?}", s.stage, s.status);
                ExitCode::from(3)
            }
            None => {
                for w in &rec.manifest.warnings {
                    eprintln!("warning: {w}");
                }
                println!(
                    "{}: {} files written",
                    rec.manifest.name,
                    rec.files.len() + 1
                );
                ExitCode::SUCCESS
            }
        },
        Err(e) if e.is_config() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
