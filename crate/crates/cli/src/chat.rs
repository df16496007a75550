//! `fedbot chat`: a terminal conversation with a weights file.

use std::io::{self, BufRead, Write};
use std::path::PathBuf;

use clap::Args;
use fedbot_core::chat::{reply, ChatError, ModelBundle};

use crate::{load_bundle, CliError, Result};

pub const PROMPT: &str = "> ";

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Reads lines until EOF or `quit`; blank lines just prompt again.
pub fn chat_loop(
    bundle: &ModelBundle,
    input: impl BufRead,
    mut output: impl Write,
) -> io::Result<()> {
    let mut lines = input.lines();
    loop {
        write!(output, "{PROMPT}")?;
        output.flush()?;
        let Some(line) = lines.next().transpose()? else {
            writeln!(output)?;
            return Ok(());
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "quit" {
            return Ok(());
        }
        match reply(&bundle.weights, &bundle.model, &bundle.vocab, line) {
            Ok(text) => writeln!(output, "{text}")?,
            Err(ChatError::Empty) => writeln!(output, "(nothing to answer)")?,
            Err(e) => return Err(io::Error::other(e.to_string())),
        }
    }
}

pub fn run(args: ChatArgs) -> Result<()> {
    let bundle = load_bundle(&args.weights, args.vocab.as_deref(), args.config.as_deref())?;
    chat_loop(&bundle, io::stdin().lock(), io::stdout().lock())
        .map_err(|e| CliError::Data(e.to_string()))
}
