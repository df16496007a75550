//! `fedbot serve-chat`, and the chat-service started by `client join --http-port`.

use std::path::PathBuf;
use std::sync::Arc;

use clap::Args;
use fedbot_core::client::{ClientNode, GLOBAL_FILE};
use fedbot_server::{ChatService, ChatServiceConfig, HttpServer, WeightSource, DEFAULT_HTTP_PORT};

use crate::{load_bundle, CliError, Result};

#[derive(Debug, Clone, Args)]
pub struct HttpArgs {
    #[arg(long = "http-host", default_value = "127.0.0.1")]
    pub host: String,
    /// Where feedback and sessions are stored; defaults to `chat/` beside the model.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Combiner status URL, e.g. http://127.0.0.1:7178/federation/status.
    #[arg(long)]
    pub combiner_status: Option<String>,
    /// Combiner metrics log to serve from /metrics.
    #[arg(long)]
    pub metrics_log: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
}

impl HttpArgs {
    fn config(&self, default_store: PathBuf) -> ChatServiceConfig {
        ChatServiceConfig {
            store_dir: self.store.clone().unwrap_or(default_store),
            combiner_status: self.combiner_status.clone(),
            metrics_log: self.metrics_log.clone(),
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Serve this weights file, reloading it when it changes.
    #[arg(long, required_unless_present = "node", conflicts_with = "node")]
    pub weights: Option<PathBuf>,
    /// Serve a client directory's latest global model and accept its
    /// corrections and pairs.
    #[arg(long)]
    pub node: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "FEDBOT_HTTP_PORT", default_value_t = DEFAULT_HTTP_PORT)]
    pub port: u16,
    #[command(flatten)]
    pub http: HttpArgs,
}

/// Chat-service for a node running in this process.
pub fn start_for_node(node: Arc<ClientNode>, port: u16, http: &HttpArgs) -> Result<HttpServer> {
    let config = http.config(node.dir().join("chat"));
    let service = ChatService::new(
        node.model.clone(),
        node.vocab.clone(),
        WeightSource::Node(node.clone()),
        Some(node),
        config,
    )?;
    let server = HttpServer::bind(
        &format!("{}:{port}", http.host),
        Arc::new(service),
        http.workers,
    )?;
    log::info!("chat-service on http://{}", server.addr());
    Ok(server)
}

pub fn run(args: ServeArgs) -> Result<()> {
    let server = match (&args.node, &args.weights) {
        (Some(dir), _) => {
            // Another process runs the node; follow the global model it saves.
            let node = Arc::new(ClientNode::open(dir)?);
            let config = args.http.config(dir.join("chat"));
            let source = WeightSource::File(dir.join(GLOBAL_FILE));
            let service = ChatService::new(
                node.model.clone(),
                node.vocab.clone(),
                source,
                Some(node),
                config,
            )?;
            HttpServer::bind(
                &format!("{}:{}", args.http.host, args.port),
                Arc::new(service),
                args.http.workers,
            )?
        }
        (None, Some(weights)) => {
            let bundle = load_bundle(weights, args.vocab.as_deref(), args.config.as_deref())?;
            let dir = weights
                .parent()
                .map(|p| p.join("chat"))
                .unwrap_or_else(|| PathBuf::from("chat"));
            let config = args.http.config(dir);
            let service = ChatService::new(
                bundle.model,
                bundle.vocab,
                WeightSource::File(weights.clone()),
                None,
                config,
            )?;
            HttpServer::bind(
                &format!("{}:{}", args.http.host, args.port),
                Arc::new(service),
                args.http.workers,
            )?
        }
        (None, None) => {
            return Err(CliError::Usage(
                "one of --weights or --node is required".into(),
            ))
        }
    };
    println!("chat-service on http://{}", server.addr());
    server.join();
    Ok(())
}
