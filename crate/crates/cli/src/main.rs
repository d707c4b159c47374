//! `spo`: data generation, training, evaluation, verification and sweeps.
//!
//! Exit codes: 0 on success, 1 for invalid flags, configuration or inputs
//! (and failed verification checks), 2 for internal errors.

mod args;
mod commands;

use std::fs;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;

use args::{Cli, Command, ConfigFile, Generator};

/// Invalid flags, configuration values or input paths.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn read_config(cli: &Cli) -> Result<ConfigFile> {
    let Some(path) = &cli.config else {
        return Ok(ConfigFile::default());
    };
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))
        .context("parsing configuration")
}

fn run(cli: Cli) -> Result<bool> {
    let mut file = read_config(&cli)?;
    match cli.command {
        Command::GenData(Generator::SpecialToken(mut a)) => {
            a.merge(std::mem::take(&mut file.gen_data.special_token));
            commands::gen_special_token(a)?;
        }
        Command::GenData(Generator::Conflicting(mut a)) => {
            a.merge(std::mem::take(&mut file.gen_data.conflicting));
            commands::gen_conflicting(a)?;
        }
        Command::GenData(Generator::Bt(mut a)) => {
            a.merge(std::mem::take(&mut file.gen_data.bt));
            commands::gen_bt(a)?;
        }
        Command::Train(mut a) => {
            a.merge(file.train);
            commands::train(a)?;
        }
        Command::Eval(mut a) => {
            a.merge(file.eval);
            commands::eval(a)?;
        }
        Command::Compare(mut a) => {
            a.merge(file.compare);
            commands::compare(a)?;
        }
        Command::Verify(mut a) => {
            a.merge(file.verify);
            return commands::verify(a);
        }
        Command::SweepAlpha(mut a) => {
            a.merge(file.sweep_alpha);
            commands::sweep_alpha(a)?;
        }
        Command::Report(mut a) => {
            a.merge(file.report);
            commands::report(a)?;
        }
    }
    Ok(true)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<spo_core::SpoError>() {
            return if e.is_input_error() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
