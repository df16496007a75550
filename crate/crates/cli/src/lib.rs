//! Shared plumbing for the `fedbot`, `combiner` and `client` binaries.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 protocol error,
//! 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use fedbot_core::chat::{ChatError, ModelBundle};
use fedbot_core::client::ClientError;
use fedbot_core::combiner::CombinerError;
use fedbot_core::data::DataError;
use fedbot_core::kv::{KvError, KvMap};
use fedbot_core::metrics::MetricsError;
use fedbot_core::protocol::ProtocolError;
use fedbot_core::tokenizer::TokenizerError;
use fedbot_core::train::TrainError;
use fedbot_core::transformer::{ModelError, TransformerConfig};
use fedbot_server::ServerError;
use thiserror::Error;

pub mod central;
pub mod chat;
pub mod client;
pub mod combiner;
pub mod prepare;
pub mod serve;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";
pub const METRICS_FILE: &str = "metrics.tsv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Protocol(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Protocol(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e)
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        CliError::data(e)
    }
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        CliError::data(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::data(e)
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::data(e)
    }
}

impl From<ChatError> for CliError {
    fn from(e: ChatError) -> Self {
        CliError::data(e)
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        CliError::Protocol(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Contract(_) => CliError::Usage(e.to_string()),
            TrainError::Model(_) => CliError::data(e),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Train(t) => t.into(),
            ClientError::Protocol(p) => p.into(),
            other => CliError::data(other),
        }
    }
}

impl From<CombinerError> for CliError {
    fn from(e: CombinerError) -> Self {
        match e {
            CombinerError::Contract(_) => CliError::Usage(e.to_string()),
            CombinerError::Metrics(_) => CliError::data(e),
            _ => CliError::Protocol(e.to_string()),
        }
    }
}

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        match e {
            ServerError::Bind(..) => CliError::Usage(e.to_string()),
            ServerError::Io { .. } => CliError::data(e),
        }
    }
}

/// Parses arguments, runs `run` and maps the outcome to an exit code.
/// Argument errors exit with 1 rather than clap's default 2, which is
/// reserved for data errors here.
pub fn main_with<P: Parser>(run: impl FnOnce(P) -> Result<()>) -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match P::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn load_model_config(path: &Path) -> Result<TransformerConfig> {
    let kv = KvMap::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    TransformerConfig::from_kv(&kv).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Weights plus their vocabulary and model config; the latter two default
/// to `vocab.txt` and `model.cfg` beside the weights.
pub fn load_bundle(
    weights: &Path,
    vocab: Option<&Path>,
    config: Option<&Path>,
) -> Result<ModelBundle> {
    ModelBundle::load(weights, vocab, config)
        .map_err(|e| CliError::Data(format!("{}: {e}", weights.display())))
}

/// Write-then-rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Copies `model` into `into` with every key prefixed by `model.`.
pub fn model_keys(model: &TransformerConfig, into: &mut KvMap) {
    for (k, v) in model.to_kv().iter() {
        into.set(&format!("model.{k}"), v);
    }
}

/// Removes a stale output file so a new run starts from an empty log.
pub fn truncate_log(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(CliError::io(path, e)),
    }
}
