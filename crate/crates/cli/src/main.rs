use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = nosa_cli::Cli::parse();
    match nosa_cli::run(cli) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
