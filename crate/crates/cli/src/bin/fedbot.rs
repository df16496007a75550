use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedbot_cli::{central, chat, main_with, prepare, serve};

/// Federated chatbot: data preparation, central baseline, evaluation and chat.
#[derive(Parser)]
#[command(name = "fedbot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a tweet CSV into client directories and train the vocabulary.
    Prepare(prepare::PrepareArgs),
    /// Train one model on all clients' data, as a baseline.
    TrainCentral(central::CentralArgs),
    /// Score a weights file on a pairs file.
    Evaluate(central::EvaluateArgs),
    /// Talk to a model in the terminal.
    Chat(chat::ChatArgs),
    /// Serve the chat-service HTTP API.
    ServeChat(serve::ServeArgs),
}

fn main() -> ExitCode {
    main_with(|cli: Cli| match cli.command {
        Command::Prepare(a) => prepare::run(a),
        Command::TrainCentral(a) => central::run_central(a),
        Command::Evaluate(a) => central::run_evaluate(a),
        Command::Chat(a) => chat::run(a),
        Command::ServeChat(a) => serve::run(a),
    })
}
