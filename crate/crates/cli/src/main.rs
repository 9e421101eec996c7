//! `pgmm`: model-based clustering with penalized model selection.
//!
//! Exit codes: 0 on success, 1 for usage, parse and I/O errors, 2 when the
//! numerics of a fit fail (a diagnostic JSON document goes to standard output).

mod commands;
mod config;
mod io;

use std::process::ExitCode;

use clap::Parser;
use pgmm::PgmmError;
use serde::Serialize;

use crate::config::Cli;

#[derive(Serialize)]
struct Diagnostic<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    status: &'static str,
    kind: &'static str,
    message: String,
    details: Vec<String>,
}

fn kind(e: &PgmmError) -> (&'static str, Vec<String>) {
    match e {
        PgmmError::Contract(_) => ("contract", Vec::new()),
        PgmmError::Numerical { .. } => ("numerical", Vec::new()),
        PgmmError::EmptyComponent { .. } => ("empty-component", Vec::new()),
        PgmmError::Initialization { .. } => ("initialization", Vec::new()),
        PgmmError::FitFailure { failures, .. } => ("fit-failure", failures.clone()),
        PgmmError::SearchFailure { reasons, .. } => ("search-failure", reasons.clone()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let name = commands::command_name(&cli.command);
    let Err(err) = commands::run(cli.command) else {
        return ExitCode::SUCCESS;
    };
    let numerical = err
        .chain()
        .find_map(|c| c.downcast_ref::<PgmmError>())
        .filter(|e| e.is_numerical());
    match numerical {
        Some(e) => {
            let (kind, details) = kind(e);
            let diagnostic = Diagnostic {
                tool: commands::TOOL,
                version: pgmm::VERSION,
                command: name,
                status: "failed",
                kind,
                message: format!("{err:#}"),
                details,
            };
            match serde_json::to_string_pretty(&diagnostic) {
                Ok(text) => println!("{text}"),
                Err(_) => eprintln!("error: {err:#}"),
            }
            ExitCode::from(2)
        }
        None => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
