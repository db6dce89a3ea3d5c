use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use rare_cli::cli::{error_record, run, Cli};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = anyhow::Error::msg(e.to_string().trim().to_string());
            eprintln!("{}", error_record("usage", &err));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(cli.command.name(), &e));
            ExitCode::FAILURE
        }
    }
}
