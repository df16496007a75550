//! Round coordinator: client selection, sample-weighted aggregation and the
//! incremental merge of round aggregates into the global model.
//!
//! A single coordinator owns [`FederationState`]. Connection handlers (or
//! in-process test clients) talk to it only through [`Event`]s on a channel
//! and receive messages through a [`ClientSender`].

use std::collections::{HashMap, HashSet};
use std::io;
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::{append_log, ClientReport, MetricsError, RoundMetrics};
use crate::protocol::{
    self, deserialize_weights, error_code, read_frame, serialize_weights, write_frame, Message,
    ProtocolError, RoundHyper,
};
use crate::tensor::Tensor;
use crate::train::round_seed;
use crate::weights::ModelWeights;

pub const DEFAULT_TIMEOUT_MS: u64 = 600_000;

#[derive(Debug, Error)]
pub enum CombinerError {
    #[error("{0}")]
    Contract(String),
    #[error("client {client:?}: tensor {tensor:?} does not match the global model")]
    Aggregation { client: String, tensor: String },
    #[error("{live} live clients, need at least {needed}")]
    NotEnoughClients { live: usize, needed: usize },
    #[error("round {t}: no updates received after one retry")]
    NoUpdates { t: u32 },
    #[error("event channel closed")]
    ChannelClosed,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub type Result<T> = std::result::Result<T, CombinerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    /// Running mean over round aggregates.
    Incremental,
    /// Each round's aggregate becomes the global model (plain FedAvg).
    Replace,
}

impl std::str::FromStr for MergeMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "incremental" => Ok(MergeMode::Incremental),
            "replace" => Ok(MergeMode::Replace),
            other => Err(format!(
                "unknown merge mode {other:?} (expected incremental or replace)"
            )),
        }
    }
}

impl std::fmt::Display for MergeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeMode::Incremental => "incremental",
            MergeMode::Replace => "replace",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub rounds: u32,
    pub fraction: f64,
    pub min_clients: usize,
    pub timeout_ms: u64,
    pub seed: u64,
    pub merge: MergeMode,
    /// Local hyper-parameters broadcast with each round; zeros defer to the
    /// clients' own settings.
    pub epochs: u32,
    pub lr: f64,
    pub batch: u32,
    pub metrics_out: Option<PathBuf>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            rounds: 30,
            fraction: 1.0,
            min_clients: 1,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            seed: 0,
            merge: MergeMode::Incremental,
            epochs: 0,
            lr: 0.0,
            batch: 0,
            metrics_out: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0)
            || self.min_clients == 0
            || self.rounds == 0
        {
            return Err(CombinerError::Contract(format!(
                "need rounds ≥ 1, 0 < fraction ≤ 1 and min_clients ≥ 1, got {} / {} / {}",
                self.rounds, self.fraction, self.min_clients
            )));
        }
        Ok(())
    }

    fn hyper(&self) -> RoundHyper {
        RoundHyper {
            epochs: self.epochs,
            lr: self.lr,
            batch: self.batch,
            deadline_ms: self.timeout_ms,
        }
    }
}

/// A trained model returned by one client for one round.
#[derive(Debug, Clone)]
pub struct ClientUpdateMsg {
    pub client_id: String,
    pub n_k: u64,
    pub weights: ModelWeights,
    pub report: ClientReport,
}

/// Seeded uniform sample of `⌈fraction·|live|⌉` clients (at least
/// `min_clients`), returned in sorted order.
pub fn select_clients(
    live: &[String],
    fraction: f64,
    min_clients: usize,
    seed: u64,
) -> Result<Vec<String>> {
    if live.len() < min_clients {
        return Err(CombinerError::NotEnoughClients {
            live: live.len(),
            needed: min_clients,
        });
    }
    let mut pool = live.to_vec();
    pool.sort();
    pool.dedup();
    let want = ((fraction * pool.len() as f64).ceil() as usize)
        .max(min_clients)
        .min(pool.len());
    let mut picked: Vec<String> = pool
        .choose_multiple(&mut ChaCha8Rng::seed_from_u64(seed), want)
        .cloned()
        .collect();
    picked.sort();
    Ok(picked)
}

/// `Σ n_k w_k / Σ n_k` per tensor, accumulated in f64.
pub fn aggregate_round(updates: &[ClientUpdateMsg]) -> Result<ModelWeights> {
    let first = updates
        .first()
        .ok_or_else(|| CombinerError::Contract("no updates to aggregate".into()))?;
    for u in updates {
        if u.n_k == 0 {
            return Err(CombinerError::Contract(format!(
                "client {:?} reported n_k = 0",
                u.client_id
            )));
        }
        check_layout(&first.weights, u)?;
    }
    let total: f64 = updates.iter().map(|u| u.n_k as f64).sum();
    let mut out = ModelWeights::new();
    for (name, t) in first.weights.iter() {
        let mut acc = vec![0.0f64; t.len()];
        for u in updates {
            let n = u.n_k as f64;
            let w = u.weights.get(name).expect("layout checked");
            for (a, &v) in acc.iter_mut().zip(w.data()) {
                *a += n * f64::from(v);
            }
        }
        let data = acc.into_iter().map(|a| (a / total) as f32).collect();
        out.insert(
            name,
            Tensor::new(t.shape().to_vec(), data).expect("same shape"),
        )
        .expect("unique names");
    }
    Ok(out)
}

fn check_layout(reference: &ModelWeights, u: &ClientUpdateMsg) -> Result<()> {
    let mismatch = |tensor: &str| CombinerError::Aggregation {
        client: u.client_id.clone(),
        tensor: tensor.to_string(),
    };
    for (name, t) in reference.iter() {
        match u.weights.get(name) {
            Some(o) if o.shape() == t.shape() => {}
            _ => return Err(mismatch(name)),
        }
    }
    if let Some(extra) = u.weights.names().find(|n| reference.get(n).is_none()) {
        return Err(mismatch(extra));
    }
    Ok(())
}

/// `w_prev + (w_round − w_prev) / t`; at `t = 1` this is `w_round` exactly.
pub fn incremental_merge(
    w_prev: &ModelWeights,
    w_round: &ModelWeights,
    t: u32,
) -> Result<ModelWeights> {
    if t < 1 {
        return Err(CombinerError::Contract(
            "merge round index starts at 1".into(),
        ));
    }
    if !w_prev.same_layout(w_round) {
        return Err(CombinerError::Contract(
            "merge inputs have different layouts".into(),
        ));
    }
    if t == 1 {
        return Ok(w_round.clone());
    }
    let t = f64::from(t);
    let mut out = ModelWeights::new();
    for ((name, p), (_, r)) in w_prev.iter().zip(w_round.iter()) {
        let data = p
            .data()
            .iter()
            .zip(r.data())
            .map(|(&p, &r)| {
                let p = f64::from(p);
                (p + (f64::from(r) - p) / t) as f32
            })
            .collect();
        out.insert(
            name,
            Tensor::new(p.shape().to_vec(), data).expect("same shape"),
        )
        .expect("unique names");
    }
    Ok(out)
}

/// Outbound half of a client connection.
pub trait ClientSender: Send {
    fn send(&self, msg: &Message) -> io::Result<()>;
}

impl ClientSender for Mutex<TcpStream> {
    fn send(&self, msg: &Message) -> io::Result<()> {
        let mut stream = self.lock().expect("sender lock");
        write_frame(&mut *stream, msg).map_err(|e| match e {
            ProtocolError::Io(e) => e,
            other => io::Error::new(io::ErrorKind::InvalidData, other.to_string()),
        })
    }
}

pub enum Event {
    Joined {
        client_id: String,
        n_k: u64,
        conn: u64,
        sender: Box<dyn ClientSender>,
    },
    Update(Message),
    /// The client refused or failed a round (ERROR message).
    Failed {
        client_id: String,
        code: u16,
        text: String,
    },
    Disconnected {
        client_id: String,
        conn: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrolledClient {
    pub n_k: u64,
    pub live: bool,
}

/// Read-only view published by the coordinator after every change.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FederationStatus {
    pub t: u32,
    pub rounds: u32,
    pub phase: String,
    pub merge: String,
    pub clients: Vec<(String, EnrolledClient)>,
    pub history: Vec<RoundMetrics>,
}

pub type SharedStatus = Arc<RwLock<FederationStatus>>;

enum Inbound {
    Update(Message),
    Failed(String),
}

type Evaluator = Box<dyn Fn(&ModelWeights) -> Option<(f64, f64)> + Send>;

pub struct FederationState {
    pub config: FederationConfig,
    pub t: u32,
    pub clients: IndexMap<String, EnrolledClient>,
    pub global: ModelWeights,
    pub previous: Option<ModelWeights>,
    pub history: Vec<RoundMetrics>,
    pub last_updates: Vec<ClientUpdateMsg>,
    senders: HashMap<String, (u64, Box<dyn ClientSender>)>,
    status: SharedStatus,
    evaluator: Option<Evaluator>,
}

pub struct FederationOutcome {
    pub weights: ModelWeights,
    pub history: Vec<RoundMetrics>,
    /// Client updates of the final round, before aggregation.
    pub partials: Vec<ClientUpdateMsg>,
    /// Wall-clock seconds per round.
    pub round_seconds: Vec<f64>,
}

impl FederationState {
    pub fn new(config: FederationConfig, initial: ModelWeights) -> Result<Self> {
        config.validate()?;
        Ok(FederationState {
            config,
            t: 0,
            clients: IndexMap::new(),
            global: initial,
            previous: None,
            history: Vec::new(),
            last_updates: Vec::new(),
            senders: HashMap::new(),
            status: SharedStatus::default(),
            evaluator: None,
        })
    }

    pub fn status_handle(&self) -> SharedStatus {
        self.status.clone()
    }

    /// Combiner-side evaluation of each new global model, returning
    /// `(accuracy %, loss)` on a held-out set.
    pub fn set_evaluator(
        &mut self,
        f: impl Fn(&ModelWeights) -> Option<(f64, f64)> + Send + 'static,
    ) {
        self.evaluator = Some(Box::new(f));
    }

    fn live(&self) -> Vec<String> {
        self.clients
            .iter()
            .filter(|(_, c)| c.live)
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn publish(&self, phase: &str) {
        let mut s = self.status.write().expect("status lock");
        s.t = self.t;
        s.rounds = self.config.rounds;
        s.phase = phase.to_string();
        s.merge = self.config.merge.to_string();
        s.clients = self
            .clients
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        s.history = self.history.clone();
    }

    /// Applies membership changes; round traffic is handed back.
    fn absorb(&mut self, event: Event) -> Option<Inbound> {
        match event {
            Event::Joined {
                client_id,
                n_k,
                conn,
                sender,
            } => {
                log::info!("client {client_id} joined with n_k = {n_k}");
                let entry = self
                    .clients
                    .entry(client_id.clone())
                    .or_insert(EnrolledClient { n_k, live: true });
                entry.live = true;
                entry.n_k = entry.n_k.max(n_k);
                self.senders.insert(client_id, (conn, sender));
                None
            }
            Event::Disconnected { client_id, conn } => {
                if self
                    .senders
                    .get(&client_id)
                    .is_some_and(|(c, _)| *c == conn)
                {
                    log::warn!("client {client_id} disconnected");
                    self.senders.remove(&client_id);
                    if let Some(c) = self.clients.get_mut(&client_id) {
                        c.live = false;
                    }
                }
                None
            }
            Event::Failed {
                client_id,
                code,
                text,
            } => {
                log::warn!("client {client_id} reported error {code}: {text}");
                Some(Inbound::Failed(client_id))
            }
            Event::Update(msg) => Some(Inbound::Update(msg)),
        }
    }

    fn send_to(&mut self, id: &str, msg: &Message) -> bool {
        let Some((_, sender)) = self.senders.get(id) else {
            return false;
        };
        if let Err(e) = sender.send(msg) {
            log::warn!("send to {id} failed: {e}");
            self.senders.remove(id);
            if let Some(c) = self.clients.get_mut(id) {
                c.live = false;
            }
            return false;
        }
        true
    }

    fn wait_for_clients(&mut self, events: &Receiver<Event>) -> Result<()> {
        let mut logged = false;
        while self.live().len() < self.config.min_clients {
            if !logged {
                log::info!(
                    "round {} postponed: {} live clients, waiting for {}",
                    self.t + 1,
                    self.live().len(),
                    self.config.min_clients
                );
                logged = true;
            }
            let event = events.recv().map_err(|_| CombinerError::ChannelClosed)?;
            if self.absorb(event).is_some() {
                log::debug!("ignoring round traffic between rounds");
            }
            self.publish("waiting for clients");
        }
        Ok(())
    }

    /// One attempt at round `t`: broadcast, then collect until every selected
    /// client has answered or the deadline passes.
    fn collect(&mut self, t: u32, events: &Receiver<Event>) -> Result<Vec<ClientUpdateMsg>> {
        let selected = select_clients(
            &self.live(),
            self.config.fraction,
            self.config.min_clients,
            round_seed(self.config.seed, t),
        )?;
        let start = Message::RoundStart {
            t,
            hyper: self.config.hyper(),
            blob: serialize_weights(&self.global),
        };
        let mut waiting: HashSet<String> = selected
            .iter()
            .filter(|id| self.send_to(id, &start))
            .cloned()
            .collect();
        log::info!(
            "round {t}: sent to {} of {} selected clients",
            waiting.len(),
            selected.len()
        );
        self.publish("training");

        let deadline = Instant::now() + Duration::from_millis(self.config.timeout_ms);
        let mut updates = Vec::new();
        while !waiting.is_empty() {
            let Some(left) = deadline.checked_duration_since(Instant::now()) else {
                log::warn!(
                    "round {t}: deadline passed, {} clients silent",
                    waiting.len()
                );
                break;
            };
            let event = match events.recv_timeout(left) {
                Ok(e) => e,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return Err(CombinerError::ChannelClosed),
            };
            if let Event::Disconnected { client_id, .. } = &event {
                waiting.remove(client_id);
            }
            match self.absorb(event) {
                Some(Inbound::Failed(client_id)) => {
                    waiting.remove(&client_id);
                }
                Some(Inbound::Update(Message::Update {
                    client_id,
                    t: ut,
                    n_k,
                    train_loss,
                    train_acc,
                    val_loss,
                    val_acc,
                    blob,
                })) => {
                    if ut != t || !waiting.contains(&client_id) {
                        log::warn!(
                            "discarding update from {client_id} for round {ut} during round {t}"
                        );
                        continue;
                    }
                    waiting.remove(&client_id);
                    let weights = match deserialize_weights(&blob) {
                        Ok(w) => w,
                        Err(e) => {
                            log::warn!("discarding update from {client_id}: {e}");
                            continue;
                        }
                    };
                    let update = ClientUpdateMsg {
                        client_id: client_id.clone(),
                        n_k,
                        weights,
                        report: ClientReport {
                            client_id: client_id.clone(),
                            n_k,
                            train_loss,
                            train_acc,
                            val_loss,
                            val_acc,
                        },
                    };
                    if let Err(e) = check_layout(&self.global, &update) {
                        log::warn!("discarding update: {e}");
                        continue;
                    }
                    if n_k == 0 {
                        log::warn!("discarding update from {client_id}: n_k = 0");
                        continue;
                    }
                    if let Some(c) = self.clients.get_mut(&client_id) {
                        c.n_k = c.n_k.max(n_k);
                    }
                    updates.push(update);
                }
                Some(Inbound::Update(other)) => log::debug!("ignoring message tag {}", other.tag()),
                None => {}
            }
        }
        Ok(updates)
    }

    /// Runs the configured number of rounds.
    pub fn run(&mut self, events: &Receiver<Event>) -> Result<FederationOutcome> {
        let mut round_seconds = Vec::new();
        while self.t < self.config.rounds {
            let t = self.t + 1;
            self.wait_for_clients(events)?;
            let round_start = Instant::now();
            let mut updates = self.collect(t, events)?;
            if updates.is_empty() {
                log::warn!("round {t}: no updates, retrying once");
                self.wait_for_clients(events)?;
                updates = self.collect(t, events)?;
                if updates.is_empty() {
                    self.publish("aborted");
                    return Err(CombinerError::NoUpdates { t });
                }
            }
            let aggregate = aggregate_round(&updates)?;
            let merged = match self.config.merge {
                MergeMode::Incremental => incremental_merge(&self.global, &aggregate, t)?,
                MergeMode::Replace => aggregate,
            };
            self.previous = Some(std::mem::replace(&mut self.global, merged));
            self.t = t;

            let reports: Vec<ClientReport> = updates.iter().map(|u| u.report.clone()).collect();
            let mut row = RoundMetrics::from_reports(t, &reports).expect("non-empty round");
            if let Some((acc, loss)) = self.evaluator.as_ref().and_then(|f| f(&self.global)) {
                row = row.with_global(acc, loss);
            }
            self.record_metrics(row)?;
            log::info!(
                "round {t} done in {:.1?}: {}",
                round_start.elapsed(),
                row.to_log_line()
            );

            let result = Message::RoundResult {
                t,
                blob: serialize_weights(&self.global),
                metrics: row,
            };
            for id in self.live() {
                self.send_to(&id, &result);
            }
            self.last_updates = updates;
            round_seconds.push(round_start.elapsed().as_secs_f64());
            self.publish(if t == self.config.rounds {
                "finished"
            } else {
                "between rounds"
            });
        }
        Ok(FederationOutcome {
            weights: self.global.clone(),
            history: self.history.clone(),
            partials: self.last_updates.clone(),
            round_seconds,
        })
    }

    /// Appends a row to the history and the metrics log.
    pub fn record_metrics(&mut self, row: RoundMetrics) -> Result<()> {
        if let Some(path) = &self.config.metrics_out {
            append_log(path, &row)?;
        }
        self.history.push(row);
        Ok(())
    }
}

static NEXT_CONN: AtomicU64 = AtomicU64::new(1);

/// Accepts client connections forever, one handler thread per connection.
pub fn accept_clients(listener: TcpListener, events: Sender<Event>) {
    for stream in listener.incoming() {
        match stream {
            Ok(stream) => {
                let events = events.clone();
                thread::spawn(move || {
                    if let Err(e) = handle_connection(stream, events) {
                        log::warn!("connection closed: {e}");
                    }
                });
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
}

fn handle_connection(stream: TcpStream, events: Sender<Event>) -> protocol::Result<()> {
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_default();
    let mut reader = stream.try_clone()?;
    let sender = Mutex::new(stream.try_clone()?);
    let conn = NEXT_CONN.fetch_add(1, Ordering::Relaxed);

    let (client_id, n_k) = loop {
        match read_frame(&mut reader) {
            Ok(Some(Message::Join { client_id, n_k })) => break (client_id, n_k),
            Ok(Some(Message::Heartbeat)) => continue,
            Ok(Some(other)) => {
                let text = format!("expected JOIN, got message tag {}", other.tag());
                sender.send(&Message::Error {
                    code: error_code::PROTOCOL,
                    text,
                })?;
            }
            Ok(None) => return Ok(()),
            Err(e) if e.connection_usable() => {
                sender.send(&Message::Error {
                    code: error_code::PROTOCOL,
                    text: e.to_string(),
                })?;
            }
            Err(e) => return Err(e),
        }
    };
    log::debug!("{peer} is {client_id}");
    let send_event = |e: Event| {
        events
            .send(e)
            .map_err(|_| io::Error::other("coordinator stopped"))
    };
    send_event(Event::Joined {
        client_id: client_id.clone(),
        n_k,
        conn,
        sender: Box::new(sender),
    })?;

    let reply = Mutex::new(stream);
    let result = loop {
        match read_frame(&mut reader) {
            Ok(Some(msg @ Message::Update { .. })) => send_event(Event::Update(msg))?,
            Ok(Some(Message::Error { code, text })) => send_event(Event::Failed {
                client_id: client_id.clone(),
                code,
                text,
            })?,
            Ok(Some(Message::Heartbeat)) => {}
            Ok(Some(other)) => log::debug!("{client_id}: unexpected message tag {}", other.tag()),
            Ok(None) => break Ok(()),
            Err(e) if e.connection_usable() => {
                reply.send(&Message::Error {
                    code: error_code::PROTOCOL,
                    text: e.to_string(),
                })?;
            }
            Err(e) => break Err(e),
        }
    };
    let _ = send_event(Event::Disconnected { client_id, conn });
    result
}
