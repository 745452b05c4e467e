//! `vsl`: command-line entry point for simulation, training, serving,
//! replay and analysis.

mod cli;
mod output;
mod run;

use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    let args = match cli::Cli::try_parse() {
        Ok(args) => args,
        Err(e) if !e.use_stderr() => {
            // Help and version requests.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": "usage", "message": first } })
            );
            return ExitCode::from(2);
        }
    };
    let level = match args.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();
    match run::run(args.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(output::report(&e)),
    }
}
