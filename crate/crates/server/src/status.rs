//! Combiner-side `GET /federation/status`.

use fedbot_core::combiner::SharedStatus;

use crate::http::{Handler, Reply};
use crate::json::status_json;

pub struct StatusService {
    status: SharedStatus,
}

impl StatusService {
    pub fn new(status: SharedStatus) -> Self {
        StatusService { status }
    }
}

impl Handler for StatusService {
    fn handle(&self, method: &str, path: &str, _body: &[u8]) -> Reply {
        match (method, path) {
            ("GET", "/federation/status") => {
                Reply::ok(status_json(&self.status.read().expect("status lock")))
            }
            (_, "/federation/status") => Reply::error(405, "use GET"),
            _ => Reply::error(404, format!("no route {path}")),
        }
    }
}
