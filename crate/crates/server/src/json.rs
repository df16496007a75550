//! JSON shapes shared by the chat-service and the combiner status endpoint.

use fedbot_core::combiner::FederationStatus;
use fedbot_core::metrics::RoundMetrics;
use serde_json::{json, Value};

/// Non-finite values become `null`.
fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map_or(Value::Null, Value::Number)
}

pub fn round_json(r: &RoundMetrics) -> Value {
    let mut v = json!({
        "t": r.t,
        "n_received": r.n_received,
        "mean_train_acc": num(r.mean_train_acc),
        "mean_val_acc": num(r.mean_val_acc),
        "mean_train_loss": num(r.mean_train_loss),
        "mean_val_loss": num(r.mean_val_loss),
    });
    if let (Some(acc), Some(loss)) = (r.global_val_acc, r.global_val_loss) {
        v["global_val_acc"] = num(acc);
        v["global_val_loss"] = num(loss);
    }
    v
}

/// Inverse of [`round_json`]; `None` if a required field is missing.
pub fn round_from_json(v: &Value) -> Option<RoundMetrics> {
    let f = |k: &str| v.get(k).map(|x| x.as_f64().unwrap_or(f64::NAN));
    Some(RoundMetrics {
        t: v.get("t")?.as_u64()? as u32,
        n_received: v.get("n_received")?.as_u64()? as u32,
        mean_train_acc: f("mean_train_acc")?,
        mean_val_acc: f("mean_val_acc")?,
        mean_train_loss: f("mean_train_loss")?,
        mean_val_loss: f("mean_val_loss")?,
        global_val_acc: f("global_val_acc"),
        global_val_loss: f("global_val_loss"),
    })
}

pub fn status_json(s: &FederationStatus) -> Value {
    json!({
        "t": s.t,
        "rounds": s.rounds,
        "phase": s.phase,
        "merge": s.merge,
        "clients": s.clients.iter().map(|(id, c)| json!({ "client_id": id, "n_k": c.n_k, "live": c.live })).collect::<Vec<_>>(),
        "last_round": s.history.last().map_or(Value::Null, round_json),
        "history": s.history.iter().map(round_json).collect::<Vec<_>>(),
    })
}
