use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = centroid_recal_cli::Cli::parse();
    match centroid_recal_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
