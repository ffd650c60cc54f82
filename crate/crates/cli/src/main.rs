use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irl_track::config::{parse_config, parse_variants};
use irl_track::experiment::{self, WORKERS_ENV};
use irl_track::Error;

#[derive(Parser)]
#[command(
    name = "irl-track",
    version,
    about = "Saturated optimal tracking with online identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one config and write run.csv and metrics.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the base config and each variant in parallel and write table.csv.
    #[command(after_help = format!("Set {WORKERS_ENV} to limit the number of worker threads."))]
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variants: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write plot.py into a run directory.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = parse_config(&config)?;
            let m = experiment::cmd_run(&cfg, &out)?;
            println!(
                "{} rows, max|u| = {}, final |g - g_hat| = {:.3e}",
                m.rows, m.max_abs_u, m.final_g_tilde_norm
            );
        }
        Command::Ablate {
            config,
            variants,
            out,
        } => {
            let cfg = parse_config(&config)?;
            let spec = parse_variants(&variants)?;
            let rows = experiment::cmd_ablate(&cfg, &spec, &out)?;
            for r in &rows {
                println!("{}: {}", r.variant, r.status);
            }
            if rows.iter().all(|r| r.status != "ok") {
                let first = rows.first().map(|r| r.status.clone()).unwrap_or_default();
                return Err(if first.contains("numerical failure") {
                    Error::Numerical {
                        step: 0,
                        what: "every variant failed".into(),
                    }
                } else {
                    Error::config("variants", "every variant failed")
                });
            }
        }
        Command::Plot { run } => {
            let path = experiment::cmd_plot(&run)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
