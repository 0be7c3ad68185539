use std::process::ExitCode;

use clap::Parser;

use gplsim_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(outcome) if outcome.success() => ExitCode::SUCCESS,
        Ok(_) => {
            eprintln!("{}", CliError::NotConverged.to_json());
            ExitCode::FAILURE
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::FAILURE
        }
    }
}
