//! Minimal JSON-over-HTTP plumbing on top of `tiny_http`.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;

use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use crate::ServerError;

/// Status code plus JSON body.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

impl Reply {
    pub fn ok(body: Value) -> Self {
        Reply { status: 200, body }
    }

    pub fn error(status: u16, message: impl Into<String>) -> Self {
        Reply {
            status,
            body: json!({ "error": message.into() }),
        }
    }
}

pub trait Handler: Send + Sync + 'static {
    fn handle(&self, method: &str, path: &str, body: &[u8]) -> Reply;
}

/// Largest request body accepted.
const MAX_BODY: u64 = 1 << 20;

const CORS: [(&str, &str); 3] = [
    ("Access-Control-Allow-Origin", "*"),
    ("Access-Control-Allow-Methods", "GET, POST, OPTIONS"),
    ("Access-Control-Allow-Headers", "Content-Type"),
];

fn header(name: &str, value: &str) -> Header {
    Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("static header")
}

/// A running server; requests are served by a fixed pool of threads.
pub struct HttpServer {
    server: Arc<Server>,
    workers: Vec<thread::JoinHandle<()>>,
}

impl HttpServer {
    pub fn bind(
        addr: &str,
        handler: Arc<dyn Handler>,
        workers: usize,
    ) -> Result<Self, ServerError> {
        let server = Arc::new(
            Server::http(addr).map_err(|e| ServerError::Bind(addr.to_string(), e.to_string()))?,
        );
        let workers = (0..workers.max(1))
            .map(|_| {
                let (server, handler) = (server.clone(), handler.clone());
                thread::spawn(move || {
                    while let Ok(request) = server.recv() {
                        respond(request, handler.as_ref());
                    }
                })
            })
            .collect();
        Ok(HttpServer { server, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.server.server_addr().to_ip().expect("tcp listener")
    }

    /// Blocks until the server is shut down from another thread.
    pub fn join(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }

    pub fn shutdown(self) {
        self.server.unblock();
        for _ in 1..self.workers.len() {
            self.server.unblock();
        }
        self.join();
    }
}

fn respond(mut request: tiny_http::Request, handler: &dyn Handler) {
    let reply = if *request.method() == Method::Options {
        None
    } else {
        let mut body = Vec::new();
        let read = request
            .as_reader()
            .take(MAX_BODY + 1)
            .read_to_end(&mut body);
        Some(match read {
            Err(e) => Reply::error(400, format!("cannot read body: {e}")),
            Ok(n) if n as u64 > MAX_BODY => Reply::error(413, "request body too large"),
            Ok(_) => {
                let path = request.url().split('?').next().unwrap_or("/").to_string();
                handler.handle(request.method().as_str(), &path, &body)
            }
        })
    };
    let mut response = match &reply {
        None => Response::from_data(Vec::new()).with_status_code(204),
        Some(r) => Response::from_data(r.body.to_string().into_bytes())
            .with_status_code(r.status)
            .with_header(header("Content-Type", "application/json")),
    };
    for (k, v) in CORS {
        response.add_header(header(k, v));
    }
    if let Err(e) = request.respond(response) {
        log::debug!("client went away: {e}");
    }
}

/// Parses a JSON request body into `T`, or a 400 reply.
pub fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, Reply> {
    serde_json::from_slice(body).map_err(|e| Reply::error(400, format!("invalid JSON body: {e}")))
}
