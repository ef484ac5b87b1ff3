use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    swat_cli::run(swat_cli::Cli::parse())
}
