//! `combiner serve`.

use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{mpsc, Arc};
use std::thread;

use clap::Args;
use fedbot_core::client::{MODEL_FILE, VOCAB_FILE};
use fedbot_core::combiner::{
    accept_clients, FederationConfig, FederationState, MergeMode, DEFAULT_TIMEOUT_MS,
};
use fedbot_core::data::{file_sha256, read_pairs};
use fedbot_core::kv::KvMap;
use fedbot_core::manifest::RunManifest;
use fedbot_core::protocol::{serialize_weights, DEFAULT_PORT};
use fedbot_core::tokenizer::Vocabulary;
use fedbot_core::train::{encode_pairs, local_evaluate};
use fedbot_core::transformer::init_weights;
use fedbot_server::{HttpServer, StatusService, DEFAULT_STATUS_PORT};

use crate::{
    create_dir, load_model_config, model_keys, truncate_log, write_atomic, CliError, Result,
    RUN_MANIFEST_FILE,
};

pub const GLOBAL_WEIGHTS: &str = "global.fbw";

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "FEDBOT_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value_t = 30)]
    pub rounds: u32,
    /// Share of live clients selected per round.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub min_clients: usize,
    /// Straggler deadline per round.
    #[arg(long, default_value_t = DEFAULT_TIMEOUT_MS)]
    pub timeout_ms: u64,
    /// Seeds the initial model and client selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model config shared with the clients.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// `incremental` (running mean over rounds) or `replace` (plain FedAvg).
    #[arg(long, default_value = "incremental")]
    pub merge: MergeMode,
    #[arg(long, default_value_t = DEFAULT_STATUS_PORT)]
    pub status_port: u16,
    /// Local epochs, learning rate and batch size sent with every round; 0
    /// leaves the client's own setting.
    #[arg(long, default_value_t = 0)]
    pub epochs: u32,
    #[arg(long, default_value_t = 0.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub batch: u32,
    /// Held-out pairs for evaluating each global model; needs --vocab.
    #[arg(long, requires = "vocab")]
    pub eval: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Directory for the final global model and the run manifest.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub fn run(args: ServeArgs) -> Result<()> {
    let model = load_model_config(&args.config)?;
    let config = FederationConfig {
        rounds: args.rounds,
        fraction: args.fraction,
        min_clients: args.min_clients,
        timeout_ms: args.timeout_ms,
        seed: args.seed,
        merge: args.merge,
        epochs: args.epochs,
        lr: args.lr,
        batch: args.batch,
        metrics_out: args.metrics_out.clone(),
    };
    let mut state = FederationState::new(config, init_weights(&model, args.seed)?)?;
    let vocab = match &args.vocab {
        Some(p) => {
            Some(Vocabulary::load(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let mut manifest = RunManifest::new("combiner serve");
    if let (Some(path), Some(vocab)) = (&args.eval, &vocab) {
        let data = encode_pairs(vocab, &read_pairs(path)?, model.max_len);
        manifest
            .datasets
            .insert(path.display().to_string(), file_sha256(path)?);
        let eval_model = model.clone();
        state.set_evaluator(move |w| local_evaluate(w, &eval_model, &data).ok());
    }
    if let Some(path) = &args.metrics_out {
        truncate_log(path)?;
    }
    let out = create_dir(&args.out)?;

    let status = HttpServer::bind(
        &format!("{}:{}", args.host, args.status_port),
        Arc::new(StatusService::new(state.status_handle())),
        2,
    )?;
    let listener = TcpListener::bind((args.host.as_str(), args.port)).map_err(|e| {
        CliError::Usage(format!("cannot listen on {}:{}: {e}", args.host, args.port))
    })?;
    let addr = listener
        .local_addr()
        .map_err(|e| CliError::Protocol(e.to_string()))?;
    println!(
        "combiner on {addr}, status on http://{}/federation/status",
        status.addr()
    );
    let (events, inbox) = mpsc::channel();
    thread::spawn(move || accept_clients(listener, events));

    let outcome = state.run(&inbox)?;

    let weights_path = out.join(GLOBAL_WEIGHTS);
    write_atomic(&weights_path, &serialize_weights(&outcome.weights))?;
    model.to_kv().save(out.join(MODEL_FILE))?;
    if let Some(vocab) = &vocab {
        vocab.save(out.join(VOCAB_FILE))?;
    }
    let mut kv = KvMap::new();
    model_keys(&model, &mut kv);
    for (k, v) in [
        ("rounds", args.rounds.to_string()),
        ("fraction", args.fraction.to_string()),
        ("min_clients", args.min_clients.to_string()),
        ("timeout_ms", args.timeout_ms.to_string()),
        ("merge", args.merge.to_string()),
        ("epochs", args.epochs.to_string()),
        ("lr", args.lr.to_string()),
        ("batch", args.batch.to_string()),
    ] {
        kv.set(k, v);
    }
    manifest.config = kv;
    manifest.seeds.insert("federation".into(), args.seed);
    manifest.metrics.extend(args.metrics_out.clone());
    manifest.round_seconds = outcome.round_seconds;
    manifest.save(out.join(RUN_MANIFEST_FILE))?;
    status.shutdown();
    println!(
        "{} rounds done, global model in {}",
        outcome.history.len(),
        weights_path.display()
    );
    Ok(())
}
