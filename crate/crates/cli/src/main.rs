//! `ovs`: expand, stabilize, evaluate, synthesize and ablate from the shell.
//!
//! Exit codes are 0 on success, 1 when processing fails and 2 for usage or
//! configuration errors. Every error is one stderr line of the form
//! `ovs: error[<kind>]: <message>`.

mod args;
mod commands;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use error::CliError;

/// Sizes the global worker pool from `OVS_THREADS` (unset or 0 means one
/// worker per core).
fn init_threads() -> Result<(), CliError> {
    let n = match std::env::var("OVS_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| {
            CliError::usage(format!(
                "OVS_THREADS must be a non-negative integer, got `{v}`"
            ))
        })?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot start worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Expand(a) => commands::expand(a),
        Command::Stabilize(a) => commands::stabilize_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Synth(a) => commands::synth(a),
        Command::Ablate(a) => commands::ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            // the reason runs up to the first blank line; fold it onto one line
            let reason: Vec<&str> = text
                .lines()
                .take_while(|l| !l.trim().is_empty())
                .map(|l| l.trim().trim_start_matches("error: "))
                .collect();
            eprintln!("{}", CliError::usage(reason.join(" ")));
            if let Some(usage) = text.lines().find(|l| l.starts_with("Usage:")) {
                eprintln!("{usage}");
            }
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            if e.kind == "usage" {
                eprintln!("Run `ovs --help` for usage.");
            }
            ExitCode::from(e.code)
        }
    }
}
