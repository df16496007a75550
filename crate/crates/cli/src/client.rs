//! `client join` and `client add-pair`.

use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use fedbot_core::client::{add_pair_to_dir, run_client, ClientNode, Provenance, RunOptions};

use crate::central::TrainArgs;
use crate::serve::{start_for_node, HttpArgs};
use crate::{CliError, Result};

#[derive(Debug, Args)]
pub struct JoinArgs {
    /// Combiner address, host:port.
    #[arg(long, default_value = "127.0.0.1:7177")]
    pub combiner: String,
    /// Client directory written by `fedbot prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Also serve the chat-service for this node on this port.
    #[arg(long, env = "FEDBOT_HTTP_PORT")]
    pub http_port: Option<u16>,
    #[command(flatten)]
    pub http: HttpArgs,
}

pub fn run_join(args: JoinArgs) -> Result<()> {
    let cfg = args.train.config()?;
    let node = Arc::new(ClientNode::open(&args.data)?);
    log::info!("{}: {} local pairs", node.client_id, node.n_k()?);
    let _server = match args.http_port {
        Some(port) => Some(start_for_node(node.clone(), port, &args.http)?),
        None => None,
    };
    run_client(&args.combiner, node, cfg, RunOptions::default())?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct AddPairArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub response: String,
}

/// Safe while `client join` runs on the same directory: the next round's
/// snapshot picks the pair up.
pub fn run_add_pair(args: AddPairArgs) -> Result<()> {
    add_pair_to_dir(
        &args.data,
        &args.query,
        &args.response,
        Provenance::Operator,
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    println!("added pair to {}", args.data.display());
    Ok(())
}
