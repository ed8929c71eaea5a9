use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use udalab_evalkit::config::ExperimentConfig;
use udalab_evalkit::report::{emit_report, SUMMARY_MD};
use udalab_evalkit::runner::{run_experiment, run_sanity, run_sweep};

#[derive(Parser)]
#[command(name = "udalab", version, about = "Robust domain-adaptation experiments on toy shift tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every method and seed, then write the report.
    Run { config: PathBuf },
    /// Train the sweep methods and write robust accuracy over the budget grid.
    Sweep { config: PathBuf },
    /// Run the attack sanity checks; exits nonzero if any check fails.
    Sanity { config: PathBuf },
    /// Rebuild summary tables and plots from a results directory.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> udalab_core::Result<bool> {
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let run = run_experiment(&cfg)?;
            println!("{} records written to {}", run.records.len(), cfg.output_dir.display());
            print!("{}", std::fs::read_to_string(cfg.output_dir.join(SUMMARY_MD))?);
            Ok(true)
        }
        Command::Sweep { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let tables = run_sweep(&cfg)?;
            println!("{} sweep tables written to {}", tables.len(), cfg.output_dir.display());
            Ok(true)
        }
        Command::Sanity { config } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let reports = run_sanity(&cfg)?;
            let mut ok = true;
            for (seed, report) in &reports {
                println!("seed {seed}");
                print!("{report}");
                ok &= report.all_passed();
            }
            Ok(ok)
        }
        Command::Report { dir } => {
            let rows = emit_report(&dir)?;
            println!("{} methods summarized in {}", rows.len(), dir.display());
            Ok(true)
        }
    }
}
