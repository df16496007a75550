//! HTTP faces of a federation: the per-node chat-service and the combiner's
//! status endpoint. Both speak JSON and allow any origin.

use std::path::PathBuf;

use thiserror::Error;

pub mod http;
pub mod json;
pub mod service;
pub mod status;
pub mod store;

pub use http::{Handler, HttpServer, Reply};
pub use service::{ChatService, ChatServiceConfig, WeightSource};
pub use status::StatusService;

pub const DEFAULT_HTTP_PORT: u16 = 8080;
pub const DEFAULT_STATUS_PORT: u16 = 7178;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen on {0}: {1}")]
    Bind(String, String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}
