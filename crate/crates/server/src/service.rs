//! Chat-service: inference on the current global model, feedback capture,
//! private pair submission and metrics exposure for one client node.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use fedbot_core::chat::{reply, ChatError};
use fedbot_core::client::{ClientError, ClientNode, Provenance};
use fedbot_core::metrics::{read_log, RoundMetrics};
use fedbot_core::protocol::deserialize_weights;
use fedbot_core::tokenizer::{normalize, Vocabulary};
use fedbot_core::transformer::{check_weights, TransformerConfig};
use fedbot_core::weights::ModelWeights;
use indexmap::IndexMap;
use rand::RngCore;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::http::{parse_body, Handler, Reply};
use crate::json::{round_from_json, round_json};
use crate::store::{FeedbackRecord, Rating, Store, TurnRecord};
use crate::ServerError;

pub const NOT_CONVERGED: &str = "federation not converged";
pub const PRIVACY_NOTICE: &str = "training data stays on this node; only model weights are shared";

/// Where the served weights come from.
pub enum WeightSource {
    /// The in-process node's latest global model.
    Node(Arc<ClientNode>),
    /// A weights file, reloaded whenever its modification time changes.
    File(PathBuf),
    Fixed(Arc<ModelWeights>),
}

#[derive(Debug, Clone, Default)]
pub struct ChatServiceConfig {
    /// Directory for `sessions.jsonl` and `feedback.jsonl`.
    pub store_dir: PathBuf,
    /// Combiner status URL, e.g. `http://127.0.0.1:7178/federation/status`.
    pub combiner_status: Option<String>,
    /// Combiner metrics log to serve from `/metrics`.
    pub metrics_log: Option<PathBuf>,
}

struct Turn {
    user: String,
}

#[derive(Default)]
struct State {
    sessions: HashMap<String, Vec<Turn>>,
    feedback: IndexMap<(String, usize), FeedbackRecord>,
}

pub struct ChatService {
    model: TransformerConfig,
    vocab: Vocabulary,
    source: WeightSource,
    file_cache: Mutex<Option<(SystemTime, Arc<ModelWeights>)>>,
    node: Option<Arc<ClientNode>>,
    config: ChatServiceConfig,
    store: Store,
    state: Mutex<State>,
    agent: ureq::Agent,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn new_session_id() -> String {
    let mut bytes = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Deserialize)]
struct ChatRequest {
    session_id: Option<String>,
    message: String,
}

#[derive(Deserialize)]
struct FeedbackRequest {
    session_id: String,
    turn: usize,
    rating: Rating,
    corrected_response: Option<String>,
}

#[derive(Deserialize)]
struct PairRequest {
    query: String,
    response: String,
}

impl ChatService {
    /// `node`, when given, receives corrections and submitted pairs and is
    /// reported in the status document.
    pub fn new(
        model: TransformerConfig,
        vocab: Vocabulary,
        source: WeightSource,
        node: Option<Arc<ClientNode>>,
        config: ChatServiceConfig,
    ) -> Result<Self, ServerError> {
        let (store, turns, feedback) = Store::open(&config.store_dir)?;
        let mut state = State::default();
        for t in turns {
            let session = state.sessions.entry(t.session_id).or_default();
            if t.turn == session.len() {
                session.push(Turn { user: t.user });
            }
        }
        for f in feedback {
            state.feedback.insert((f.session_id.clone(), f.turn), f);
        }
        Ok(ChatService {
            model,
            vocab,
            source,
            file_cache: Mutex::new(None),
            node,
            config,
            store,
            state: Mutex::new(state),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(2))
                .build(),
        })
    }

    /// The weights to answer with, and the round they came from if known.
    pub fn current_weights(&self) -> Option<(Arc<ModelWeights>, Option<u32>)> {
        match &self.source {
            WeightSource::Node(node) => node.global().map(|g| (g.weights, Some(g.t))),
            WeightSource::Fixed(w) => Some((w.clone(), None)),
            WeightSource::File(path) => {
                let mut cache = self.file_cache.lock().expect("cache lock");
                if let Ok(modified) = fs::metadata(path).and_then(|m| m.modified()) {
                    if cache.as_ref().map(|(m, _)| *m) != Some(modified) {
                        let loaded = fs::read(path)
                            .map_err(|e| e.to_string())
                            .and_then(|b| deserialize_weights(&b).map_err(|e| e.to_string()))
                            .and_then(|w| {
                                check_weights(&w, &self.model)
                                    .map(|_| w)
                                    .map_err(|e| e.to_string())
                            });
                        match loaded {
                            Ok(w) => *cache = Some((modified, Arc::new(w))),
                            Err(e) => log::warn!("{}: keeping previous model: {e}", path.display()),
                        }
                    }
                }
                cache.as_ref().map(|(_, w)| (w.clone(), None))
            }
        }
    }

    fn combiner_status(&self) -> Option<Value> {
        let url = self.config.combiner_status.as_ref()?;
        let text = self.agent.get(url).call().ok()?.into_string().ok()?;
        serde_json::from_str(&text).ok()
    }

    fn chat(&self, body: &[u8]) -> Reply {
        let req: ChatRequest = match parse_body(body) {
            Ok(r) => r,
            Err(reply) => return reply,
        };
        if normalize(&req.message).is_empty() {
            return Reply::error(400, "message is empty");
        }
        if let Some(id) = &req.session_id {
            if !self
                .state
                .lock()
                .expect("state lock")
                .sessions
                .contains_key(id)
            {
                return Reply::error(404, format!("unknown session {id}"));
            }
        }
        let Some((weights, _)) = self.current_weights() else {
            return Reply::error(503, NOT_CONVERGED);
        };
        let response = match reply(&weights, &self.model, &self.vocab, &req.message) {
            Ok(r) => r,
            Err(ChatError::Empty) => return Reply::error(400, "message is empty"),
            Err(e) => return Reply::error(500, e.to_string()),
        };
        let mut state = self.state.lock().expect("state lock");
        let session_id = req.session_id.unwrap_or_else(new_session_id);
        let turns = state.sessions.entry(session_id.clone()).or_default();
        let turn = turns.len();
        let record = TurnRecord {
            session_id: session_id.clone(),
            turn,
            user: req.message.clone(),
            bot: response.clone(),
            timestamp: now(),
            client_id: self.node.as_ref().map(|n| n.client_id.clone()),
        };
        if let Err(e) = self.store.append_turn(&record) {
            return Reply::error(500, e.to_string());
        }
        turns.push(Turn { user: req.message });
        Reply::ok(json!({ "session_id": session_id, "turn": turn, "response": response }))
    }

    fn feedback(&self, body: &[u8]) -> Reply {
        let req: FeedbackRequest = match parse_body(body) {
            Ok(r) => r,
            Err(reply) => return reply,
        };
        let correction = req.corrected_response.filter(|c| !c.trim().is_empty());
        let mut state = self.state.lock().expect("state lock");
        let Some(user) = state
            .sessions
            .get(&req.session_id)
            .and_then(|s| s.get(req.turn))
            .map(|t| t.user.clone())
        else {
            return Reply::error(
                404,
                format!("no turn {} in session {}", req.turn, req.session_id),
            );
        };
        let key = (req.session_id.clone(), req.turn);
        let previous = state
            .feedback
            .get(&key)
            .and_then(|f| f.corrected_response.clone());
        let record = FeedbackRecord {
            session_id: req.session_id,
            turn: req.turn,
            rating: req.rating,
            corrected_response: correction.clone(),
            timestamp: now(),
        };
        let old = state.feedback.insert(key.clone(), record);
        if let Err(e) = self.store.write_feedback(state.feedback.values()) {
            match old {
                Some(o) => state.feedback.insert(key, o),
                None => state.feedback.shift_remove(&key),
            };
            return Reply::error(500, e.to_string());
        }
        drop(state);
        // A repeated submission of the same correction adds nothing.
        let mut added = false;
        let mut n_k = None;
        if let (Some(c), Some(node)) = (&correction, &self.node) {
            if previous.as_ref() != Some(c) {
                match node.add_local_pair(&user, c, Provenance::Feedback) {
                    Ok(n) => {
                        added = true;
                        n_k = Some(n);
                    }
                    Err(e) => return Reply::error(400, e.to_string()),
                }
            }
        }
        Reply::ok(json!({ "ok": true, "added_to_training": added, "n_k": n_k }))
    }

    fn add_pair(&self, body: &[u8]) -> Reply {
        let Some(node) = &self.node else {
            return Reply::error(404, "no client node is bound to this service");
        };
        let req: PairRequest = match parse_body(body) {
            Ok(r) => r,
            Err(reply) => return reply,
        };
        match node.add_local_pair(&req.query, &req.response, Provenance::Operator) {
            Ok(n_k) => {
                let added = node.additions().map(|a| a.len()).unwrap_or(0);
                Reply::ok(json!({ "ok": true, "n_k": n_k, "local_additions": added }))
            }
            Err(e @ ClientError::Validation(_)) => Reply::error(400, e.to_string()),
            Err(e) => Reply::error(500, e.to_string()),
        }
    }

    fn metrics(&self) -> Reply {
        let status = self.combiner_status();
        let rows: Vec<RoundMetrics> = match &self.config.metrics_log {
            Some(path) if path.exists() => match read_log(path) {
                Ok(rows) => rows,
                Err(e) => return Reply::error(500, e.to_string()),
            },
            _ => status
                .as_ref()
                .and_then(|s| s.get("history"))
                .and_then(Value::as_array)
                .map(|h| h.iter().filter_map(round_from_json).collect())
                .unwrap_or_default(),
        };
        let t = status
            .as_ref()
            .and_then(|s| s.get("t"))
            .and_then(Value::as_u64)
            .unwrap_or_else(|| rows.last().map_or(0, |r| u64::from(r.t)));
        let clients = status
            .as_ref()
            .and_then(|s| s.get("clients"))
            .and_then(Value::as_array)
            .map(Vec::len);
        Reply::ok(json!({
            "t": t,
            "clients": clients,
            "rows": rows.iter().map(round_json).collect::<Vec<_>>(),
        }))
    }

    fn status(&self) -> Reply {
        let combiner = self.combiner_status();
        let loaded = self.current_weights();
        let counts = self.node.as_ref().map(|node| {
            let additions = node.additions().map(|a| a.len()).unwrap_or(0);
            let n_k = node.n_k().unwrap_or(0);
            json!({
                "train": n_k as usize - additions,
                "validation": node.validation().len(),
                "local_additions": additions,
                "n_k": n_k,
            })
        });
        let model_round = loaded.as_ref().and_then(|(_, t)| *t);
        Reply::ok(json!({
            "status": if combiner.is_some() { "ok" } else { "degraded" },
            "role": if self.node.is_some() { "client" } else { "chat" },
            "client_id": self.node.as_ref().map(|n| n.client_id.clone()),
            "t": combiner.as_ref().and_then(|c| c.get("t").cloned()).unwrap_or_else(|| json!(model_round.unwrap_or(0))),
            "model_loaded": loaded.is_some(),
            "model_round": model_round,
            "counts": counts,
            "combiner": combiner,
            "notice": PRIVACY_NOTICE,
        }))
    }
}

impl Handler for ChatService {
    fn handle(&self, method: &str, path: &str, body: &[u8]) -> Reply {
        match (method, path) {
            ("POST", "/chat") => self.chat(body),
            ("POST", "/feedback") => self.feedback(body),
            ("POST", "/pairs") => self.add_pair(body),
            ("GET", "/metrics") => self.metrics(),
            ("GET", "/federation/status") => self.status(),
            (_, "/chat" | "/feedback" | "/pairs" | "/metrics" | "/federation/status") => {
                Reply::error(405, format!("{method} not allowed on {path}"))
            }
            _ => Reply::error(404, format!("no route {path}")),
        }
    }
}
