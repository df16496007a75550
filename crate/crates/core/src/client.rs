//! Federated participant: private data, local training per round and
//! operator/feedback additions that never leave the node.

use std::fs;
use std::io::Write;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use crate::combiner::{ClientSender, Event};
use crate::data::{self, ClientDataset, ConversationPair, DataError};
use crate::kv::KvMap;
use crate::protocol::{
    deserialize_weights, error_code, read_frame, serialize_weights, write_frame, Message,
    ProtocolError, RoundHyper,
};
use crate::tokenizer::{TokenizerError, Vocabulary};
use crate::train::{
    client_update, encode_pairs, local_evaluate, round_seed, LocalTrainConfig, TrainError,
};
use crate::transformer::{check_weights, ModelError, TransformerConfig};
use crate::weights::ModelWeights;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_FILE: &str = "model.cfg";
pub const ADDITIONS_FILE: &str = "local_additions.tsv";
pub const GLOBAL_FILE: &str = "global.fbw";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid pair: {0}")]
    Validation(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Operator,
    Feedback,
}

impl Provenance {
    fn as_str(self) -> &'static str {
        match self {
            Provenance::Operator => "operator",
            Provenance::Feedback => "feedback",
        }
    }
}

/// Pairs added on this node since it was provisioned. Kept in
/// `local_additions.tsv` next to the training data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalAdditionBatch {
    pub pairs: Vec<ConversationPair>,
    pub provenance: Vec<Provenance>,
}

impl LocalAdditionBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// The latest global model received from the combiner.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub t: u32,
    pub weights: Arc<ModelWeights>,
}

pub struct ClientNode {
    pub client_id: String,
    pub model: TransformerConfig,
    pub vocab: Vocabulary,
    dir: PathBuf,
    train: Vec<ConversationPair>,
    validation: Vec<ConversationPair>,
    store: Mutex<()>,
    global: RwLock<Option<GlobalModel>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ClientError + '_ {
    move |source| ClientError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl ClientNode {
    /// Opens a prepared client directory: `train.tsv`, `val.tsv`,
    /// `vocab.txt`, `model.cfg` and optionally `manifest.txt`,
    /// `local_additions.tsv` and `global.fbw`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let dataset = data::read_client_dir(dir)?;
        let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
        let model = TransformerConfig::from_kv(
            &KvMap::load(dir.join(MODEL_FILE)).map_err(ModelError::from)?,
        )?;
        let node = Self::new(dir, dataset, model, vocab)?;
        let global_path = dir.join(GLOBAL_FILE);
        if global_path.exists() {
            let weights =
                deserialize_weights(&fs::read(&global_path).map_err(io_err(&global_path))?)?;
            if check_weights(&weights, &node.model).is_ok() {
                *node.global.write().expect("global lock") = Some(GlobalModel {
                    t: 0,
                    weights: Arc::new(weights),
                });
            }
        }
        Ok(node)
    }

    pub fn new(
        dir: impl AsRef<Path>,
        dataset: ClientDataset,
        model: TransformerConfig,
        vocab: Vocabulary,
    ) -> Result<Self> {
        model.validate()?;
        if vocab.len() != model.vocab_size {
            return Err(ModelError::Config(format!(
                "vocabulary has {} entries but the model expects {}",
                vocab.len(),
                model.vocab_size
            ))
            .into());
        }
        Ok(ClientNode {
            client_id: dataset.client_id,
            model,
            vocab,
            dir: dir.as_ref().to_path_buf(),
            train: dataset.train,
            validation: dataset.validation,
            store: Mutex::new(()),
            global: RwLock::new(None),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn validation(&self) -> &[ConversationPair] {
        &self.validation
    }

    pub fn additions(&self) -> Result<LocalAdditionBatch> {
        let _guard = self.store.lock().expect("store lock");
        read_additions(&self.dir.join(ADDITIONS_FILE))
    }

    /// Training set as of now: provisioned pairs plus every local addition.
    pub fn snapshot(&self) -> Result<Vec<ConversationPair>> {
        let mut pairs = self.train.clone();
        pairs.extend(self.additions()?.pairs);
        Ok(pairs)
    }

    pub fn n_k(&self) -> Result<u64> {
        Ok((self.train.len() + self.additions()?.len()) as u64)
    }

    /// Stores a new private pair; it joins the training set at the next
    /// round start. Returns the new `n_k`.
    pub fn add_local_pair(
        &self,
        query: &str,
        response: &str,
        provenance: Provenance,
    ) -> Result<u64> {
        let pair = ConversationPair::normalized(query, response, "local").ok_or_else(|| {
            ClientError::Validation("query and response must both be non-empty".into())
        })?;
        let path = self.dir.join(ADDITIONS_FILE);
        {
            let _guard = self.store.lock().expect("store lock");
            append_addition(&path, &pair, provenance)?;
        }
        self.n_k()
    }

    pub fn global(&self) -> Option<GlobalModel> {
        self.global.read().expect("global lock").clone()
    }

    /// Swaps in a new global model and persists it; readers holding the old
    /// `Arc` finish on the old weights.
    pub fn install_global(&self, t: u32, weights: ModelWeights) -> Result<()> {
        check_weights(&weights, &self.model)?;
        let path = self.dir.join(GLOBAL_FILE);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serialize_weights(&weights)).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        *self.global.write().expect("global lock") = Some(GlobalModel {
            t,
            weights: Arc::new(weights),
        });
        Ok(())
    }

    /// Executes one ROUND_START and returns the reply: an UPDATE, or an
    /// ERROR when the round is refused or training fails.
    pub fn round(
        &self,
        t: u32,
        hyper: &RoundHyper,
        blob: &[u8],
        cfg: &LocalTrainConfig,
    ) -> Message {
        match self.try_round(t, hyper, blob, cfg) {
            Ok(msg) => msg,
            Err(e) => {
                let code = match &e {
                    ClientError::Protocol(ProtocolError::Version(_)) => error_code::BAD_VERSION,
                    ClientError::Protocol(_) | ClientError::Model(_) => error_code::PROTOCOL,
                    ClientError::Train(TrainError::NonFinite { .. }) => error_code::NUMERIC,
                    _ => error_code::DATA,
                };
                log::warn!("{}: refusing round {t}: {e}", self.client_id);
                Message::Error {
                    code,
                    text: e.to_string(),
                }
            }
        }
    }

    fn try_round(
        &self,
        t: u32,
        hyper: &RoundHyper,
        blob: &[u8],
        cfg: &LocalTrainConfig,
    ) -> Result<Message> {
        let weights = deserialize_weights(blob)?;
        check_weights(&weights, &self.model)?;
        let pairs = self.snapshot()?;
        let n_k = pairs.len() as u64;
        let train = encode_pairs(&self.vocab, &pairs, self.model.max_len);
        let local = effective_config(cfg, hyper, t);
        let outcome = client_update(&weights, &self.model, &train, &local)?;
        let eval_set = if self.validation.is_empty() {
            log::warn!(
                "{}: no validation pairs, reporting training-set metrics",
                self.client_id
            );
            &pairs
        } else {
            &self.validation
        };
        let (val_acc, val_loss) = local_evaluate(
            &outcome.weights,
            &self.model,
            &encode_pairs(&self.vocab, eval_set, self.model.max_len),
        )?;
        Ok(Message::Update {
            client_id: self.client_id.clone(),
            t,
            n_k,
            train_loss: outcome.train_loss,
            train_acc: outcome.train_acc,
            val_loss,
            val_acc,
            blob: serialize_weights(&outcome.weights),
        })
    }
}

/// The client's settings with the round's non-zero overrides applied and a
/// per-round shuffle seed.
pub fn effective_config(cfg: &LocalTrainConfig, hyper: &RoundHyper, t: u32) -> LocalTrainConfig {
    let mut local = *cfg;
    if hyper.epochs > 0 {
        local.epochs = hyper.epochs as usize;
    }
    if hyper.lr > 0.0 {
        local.lr = hyper.lr;
    }
    if hyper.batch > 0 {
        local.batch_size = hyper.batch as usize;
    }
    local.seed = round_seed(cfg.seed, t);
    local
}

fn append_addition(path: &Path, pair: &ConversationPair, provenance: Provenance) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    // One write per line so appends from another process never interleave.
    let line = format!(
        "{}\t{}\t{}\n",
        pair.query,
        pair.response,
        provenance.as_str()
    );
    file.write_all(line.as_bytes()).map_err(io_err(path))
}

fn read_additions(path: &Path) -> Result<LocalAdditionBatch> {
    let mut batch = LocalAdditionBatch::default();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(batch),
        Err(e) => return Err(io_err(path)(e)),
    };
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let mut fields = line.split('\t');
        let (Some(query), Some(response)) = (fields.next(), fields.next()) else {
            return Err(DataError::Tsv {
                path: path.to_path_buf(),
                line: i + 1,
            }
            .into());
        };
        batch.pairs.push(ConversationPair {
            query: query.to_string(),
            response: response.to_string(),
            brand: "local".into(),
        });
        batch.provenance.push(match fields.next() {
            Some("feedback") => Provenance::Feedback,
            _ => Provenance::Operator,
        });
    }
    Ok(batch)
}

/// Writes `root/<client_id>/` with everything [`ClientNode::open`] needs:
/// the dataset and manifest, the shared vocabulary and the model
/// configuration. Returns the client directory.
pub fn provision(
    root: impl AsRef<Path>,
    dataset: &ClientDataset,
    seed: u64,
    model: &TransformerConfig,
    vocab: &Vocabulary,
) -> Result<PathBuf> {
    let dir = data::write_client_dir(root, dataset, seed)?;
    vocab.save(dir.join(VOCAB_FILE))?;
    model
        .to_kv()
        .save(dir.join(MODEL_FILE))
        .map_err(ModelError::from)?;
    Ok(dir)
}

/// Appends a pair to a client directory without opening the node, for use
/// from a separate process. The running node picks it up at its next round.
pub fn add_pair_to_dir(
    dir: impl AsRef<Path>,
    query: &str,
    response: &str,
    provenance: Provenance,
) -> Result<()> {
    let pair = ConversationPair::normalized(query, response, "local").ok_or_else(|| {
        ClientError::Validation("query and response must both be non-empty".into())
    })?;
    append_addition(&dir.as_ref().join(ADDITIONS_FILE), &pair, provenance)
}

/// Cooperative shutdown for [`run_client`]: sets a flag and closes the live
/// connection so a blocked read returns.
#[derive(Clone, Default)]
pub struct StopHandle {
    stopped: Arc<AtomicBool>,
    stream: Arc<Mutex<Option<TcpStream>>>,
}

impl StopHandle {
    pub fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
        if let Some(s) = self.stream.lock().expect("stream lock").take() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped.load(Ordering::SeqCst)
    }

    fn sleep(&self, d: Duration) {
        let step = Duration::from_millis(20);
        let mut left = d;
        while !self.is_stopped() && !left.is_zero() {
            let s = left.min(step);
            thread::sleep(s);
            left -= s;
        }
    }
}

#[derive(Clone)]
pub struct RunOptions {
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
    pub stop: StopHandle,
    /// Count of connection attempts, for observability and tests.
    pub attempts: Arc<AtomicU64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            backoff_initial: Duration::from_millis(250),
            backoff_max: Duration::from_secs(30),
            stop: StopHandle::default(),
            attempts: Arc::default(),
        }
    }
}

/// Joins the combiner at `addr` and serves rounds until stopped,
/// reconnecting with capped exponential backoff.
pub fn run_client(
    addr: &str,
    node: Arc<ClientNode>,
    cfg: LocalTrainConfig,
    opts: RunOptions,
) -> Result<()> {
    let mut backoff = opts.backoff_initial;
    while !opts.stop.is_stopped() {
        opts.attempts.fetch_add(1, Ordering::Relaxed);
        let stream = match TcpStream::connect(addr) {
            Ok(s) => s,
            Err(e) => {
                log::info!(
                    "{}: combiner {addr} unreachable ({e}), retrying in {backoff:?}",
                    node.client_id
                );
                opts.stop.sleep(backoff);
                backoff = (backoff * 2).min(opts.backoff_max);
                continue;
            }
        };
        backoff = opts.backoff_initial;
        *opts.stop.stream.lock().expect("stream lock") = stream.try_clone().ok();
        if opts.stop.is_stopped() {
            break;
        }
        match session(stream, &node, &cfg) {
            Ok(()) => log::info!("{}: combiner closed the connection", node.client_id),
            Err(e) => log::warn!("{}: connection lost: {e}", node.client_id),
        }
        if !opts.stop.is_stopped() {
            opts.stop.sleep(backoff);
        }
    }
    Ok(())
}

fn session(stream: TcpStream, node: &ClientNode, cfg: &LocalTrainConfig) -> Result<()> {
    let _ = stream.set_nodelay(true);
    let mut reader = stream.try_clone().map_err(ProtocolError::from)?;
    let mut writer = stream;
    write_frame(
        &mut writer,
        &Message::Join {
            client_id: node.client_id.clone(),
            n_k: node.n_k()?,
        },
    )?;
    loop {
        let msg = match read_frame(&mut reader) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e) if e.connection_usable() => {
                log::warn!("{}: {e}", node.client_id);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(reply) = handle_message(node, cfg, msg) {
            write_frame(&mut writer, &reply)?;
        }
    }
}

fn handle_message(node: &ClientNode, cfg: &LocalTrainConfig, msg: Message) -> Option<Message> {
    match msg {
        Message::RoundStart { t, hyper, blob } => Some(node.round(t, &hyper, &blob, cfg)),
        Message::RoundResult { t, blob, metrics } => {
            match deserialize_weights(&blob)
                .map_err(ClientError::from)
                .and_then(|w| node.install_global(t, w))
            {
                Ok(()) => log::info!(
                    "{}: installed global model of round {t} ({})",
                    node.client_id,
                    metrics.to_log_line()
                ),
                Err(e) => log::warn!(
                    "{}: cannot install global model of round {t}: {e}",
                    node.client_id
                ),
            }
            None
        }
        Message::Error { code, text } => {
            log::warn!("{}: combiner error {code}: {text}", node.client_id);
            None
        }
        _ => None,
    }
}

struct ChannelSender(Mutex<Sender<Message>>);

impl ClientSender for ChannelSender {
    fn send(&self, msg: &Message) -> std::io::Result<()> {
        self.0
            .lock()
            .expect("sender lock")
            .send(msg.clone())
            .map_err(|_| {
                std::io::Error::new(std::io::ErrorKind::BrokenPipe, "local client stopped")
            })
    }
}

/// Attaches a node to a coordinator in the same process, on its own thread.
/// Behaves like a TCP client minus the socket.
pub fn spawn_local_client(
    node: Arc<ClientNode>,
    cfg: LocalTrainConfig,
    events: Sender<Event>,
) -> Result<thread::JoinHandle<()>> {
    let (tx, rx) = mpsc::channel::<Message>();
    let client_id = node.client_id.clone();
    events
        .send(Event::Joined {
            client_id: client_id.clone(),
            n_k: node.n_k()?,
            conn: 0,
            sender: Box::new(ChannelSender(Mutex::new(tx))),
        })
        .map_err(|_| ClientError::Protocol(ProtocolError::Disconnected))?;
    Ok(thread::spawn(move || {
        for msg in rx {
            if let Some(reply) = handle_message(&node, &cfg, msg) {
                let event = match reply {
                    Message::Error { code, text } => Event::Failed {
                        client_id: client_id.clone(),
                        code,
                        text,
                    },
                    other => Event::Update(other),
                };
                if events.send(event).is_err() {
                    break;
                }
            }
        }
    }))
}
