//! `kvw` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric error,
//! 4 no feasible configuration.

mod cli;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let args = cli::args::Cli::parse();
    match cli::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kvw: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
