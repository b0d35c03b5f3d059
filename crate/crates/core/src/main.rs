use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use csfl::runner::{self, exit_code, validate_config, RunConfig};

#[derive(Parser)]
#[command(
    name = "csfl",
    version,
    about = "Complement-sparsification federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics file.
    Run { config: PathBuf },
    /// Check a config without running it.
    Validate {
        config: PathBuf,
        /// Treat warnings (e.g. aggregation ratio outside (1, 1/lr]) as errors.
        #[arg(long)]
        strict: bool,
    },
    /// Run the config once per value of one parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn fail(e: csfl::Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e) as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            if let Some(w) = cfg.experiment.ratio_bound_warning() {
                eprintln!("warning: {w}");
            }
            match runner::execute(&cfg) {
                Ok((_, summary)) => {
                    println!("{summary}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Validate { config, strict } => {
            let cfg = match RunConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let report = validate_config(&cfg);
            for w in &report.warnings {
                println!("warning: {w}");
            }
            for e in &report.errors {
                println!("error: {e}");
            }
            if report.is_ok(strict) {
                println!("ok");
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Command::Sweep {
            config,
            param,
            values,
        } => {
            let raw = match runner::load_raw(&config) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            match runner::sweep(&raw, &param, &values) {
                Ok(summaries) => {
                    for (v, s) in values.iter().zip(&summaries) {
                        println!("{param}={v}: {s}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
