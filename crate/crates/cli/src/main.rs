//! `wavy`: runs the dynamics, diagnostics, check and training experiments
//! from a JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Simulate,
    Oversmoothing,
    Energy,
    Gradcheck,
    Train,
    Blockcheck,
}

#[derive(Debug, Parser)]
#[command(name = "wavy", version, about = "Diffusive and wavy residual dynamics experiments")]
struct Cli {
    command: Command,
    #[arg(long)]
    config: PathBuf,
    /// Named hyperparameter set the config file is layered over.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match config::load(&cli.config, cli.preset.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command, &cfg, cli.out.as_deref()) {
        Ok(commands::Outcome::Pass) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Fail(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(e) => match e.downcast_ref::<config::ConfigError>() {
            Some(c) => {
                eprintln!("config error: {c}");
                ExitCode::from(2)
            }
            None => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
