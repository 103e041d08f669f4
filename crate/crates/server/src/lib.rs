//! Local ingest service: subscribes to every node, keeps an append-only
//! record store and serves it over HTTP with a live event stream.

pub mod api;
pub mod relay;
pub mod service;
pub mod store;
pub mod views;

pub use api::{serve, spawn, TOKEN_HEADER};
pub use relay::{MemoryRelay, NoRelay, Relay, RelayError, Relayed};
pub use service::{now_ms, EdgeServer, IngestLoop, IngestStats, Ingested, NodeView, ServerConfig};
pub use store::{Query, RecordKind, RecoveryReport, Store, StoreError, StoreOptions, StoreRecord};

pub const DEFAULT_HTTP_PORT: u16 = 8080;
