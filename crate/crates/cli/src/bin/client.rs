use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbot_cli::{client, main_with};

/// Federation client node.
#[derive(Parser)]
#[command(name = "client", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Connect to a combiner and train on local data every round.
    Join(client::JoinArgs),
    /// Add a query/response pair to this node's training data.
    AddPair(client::AddPairArgs),
}

fn main() -> ExitCode {
    main_with(|cli: Cli| match cli.command {
        Command::Join(a) => client::run_join(a),
        Command::AddPair(a) => client::run_add_pair(a),
    })
}
