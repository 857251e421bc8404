//! `mosuq` command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime failure (divergence, invariant
//! violation), 2 on usage, configuration or input-file errors.

mod args;
mod commands;

use std::fmt;
use std::process::ExitCode;

use args::{Cli, Command, Layered};
use clap::Parser;

/// A problem with how the program was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<mosuq::Error>() {
            return match e {
                mosuq::Error::Diverged { .. } | mosuq::Error::Invariant(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a.with_config_file()?),
        Command::Train(a) => commands::train_cmd(a.with_config_file()?),
        Command::Calibrate(a) => commands::calibrate_cmd(a.with_config_file()?),
        Command::Evaluate(a) => commands::evaluate_cmd(a.with_config_file()?),
        Command::OodDetect(a) => commands::ood_detect_cmd(a.with_config_file()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
