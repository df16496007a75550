use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbot_cli::{combiner, main_with};

/// Federation coordinator.
#[derive(Parser)]
#[command(name = "combiner", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federation and write the final global model.
    Serve(combiner::ServeArgs),
}

fn main() -> ExitCode {
    main_with(|cli: Cli| match cli.command {
        Command::Serve(a) => combiner::run(a),
    })
}
