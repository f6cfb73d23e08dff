use std::process::ExitCode;

use clap::Parser;
use degen_lio::harness::cli::{execute, Cli};

fn main() -> ExitCode {
    execute(Cli::parse())
}
