mod commands;
mod error;
mod spec;

use std::fs;
use std::process::ExitCode;

use clap::Parser;

use crate::error::{CliError, CliResult, EXIT_OK};
use crate::spec::{Cli, CliCommand, ExperimentSpec};

fn run(cli: Cli) -> CliResult<String> {
    let spec = match cli.command {
        CliCommand::Run { spec } => {
            let text = fs::read_to_string(&spec).map_err(|e| CliError::io(&spec, e))?;
            serde_json::from_str::<ExperimentSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", spec.display())))?
        }
        CliCommand::Experiment(spec) => spec,
    };
    commands::execute(spec)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            print!("{out}");
            ExitCode::from(EXIT_OK as u8)
        }
        Err(e) => {
            if let CliError::Oracle { report, .. } = &e {
                print!("{report}");
            }
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
