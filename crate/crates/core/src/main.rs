use std::process::ExitCode;

use clap::Parser;
use rugosity_core::cli::{self, Cli};
use rugosity_core::Error;

fn main() -> ExitCode {
    match cli::run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::BoundViolation { .. } => ExitCode::from(3),
                Error::Divergence { .. } => ExitCode::from(4),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
