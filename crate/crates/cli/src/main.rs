//! `apcre`: command-line runner for APC designs, constraint checks,
//! shrinkage simulations and REML fits.
//!
//! Exit status: 0 on success, 1 on runtime errors, 2 on bad arguments or
//! input, 3 when a requested check fails.

mod cli;
mod commands;
mod output;

use std::path::Path;
use std::process::ExitCode;

use anyhow::Result;
use apc_re::{ApcError, Execution};
use clap::Parser;

use cli::{Cli, Command};
use output::{read_manifest, OutDir, RunManifest, MANIFEST_NAME};

#[derive(Debug)]
pub enum CliError {
    Args(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Args(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CliError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<ApcError>() {
        Some(ApcError::InvalidArgument(_) | ApcError::DimensionTooSmall { .. } | ApcError::DimensionMismatch(_)) => 2,
        _ => 1,
    }
}

fn run_command(command: &Command, out_dir: &Path, exec: Execution) -> Result<commands::Outcome> {
    let started_at = chrono::Utc::now().to_rfc3339();
    let mut out = OutDir::create(out_dir)?;
    let outcome = match command {
        Command::Design(a) => commands::design(a, &mut out)?,
        Command::Verify(a) => commands::verify(a, &mut out, exec)?,
        Command::Simulate(a) => commands::simulate(a, &mut out, exec)?,
        Command::Profile(a) => commands::profile(a, &mut out, exec)?,
        Command::Fit(a) => commands::fit(a, &mut out, exec)?,
        Command::Decompose(a) => commands::decompose(a, &mut out)?,
        Command::Replay(a) => {
            let manifest = read_manifest(&a.manifest)?;
            let exec = if manifest.execution == "sequential" {
                Execution::Sequential
            } else {
                exec
            };
            return run_command(&manifest.parameters, out_dir, exec);
        }
    };
    let manifest = RunManifest {
        command: command.name().to_string(),
        parameters: command.clone(),
        seed: command.seed(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        execution: match exec {
            Execution::Sequential => "sequential".into(),
            Execution::Parallel => "parallel".into(),
        },
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        outputs: out.written().to_vec(),
    };
    out.write_json(MANIFEST_NAME, &manifest)?;
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match run_command(&cli.command, &cli.out_dir, exec) {
        Ok(outcome) => match outcome.check {
            Ok(()) => ExitCode::SUCCESS,
            Err(msg) => {
                eprintln!("check failed: {msg}");
                ExitCode::from(3)
            }
        },
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
