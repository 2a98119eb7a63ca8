use std::process::ExitCode;

use clap::Parser;
use moose::cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => {
                    eprintln!("usage error: {msg}\n\nrun `moose --help` for usage")
                }
                CliError::Runtime(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
