//! The server's shared state and the ingest path from broker messages to
//! the store and the live stream.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use tokio::sync::broadcast;

use irrigo_core::edgenode::NodeConfig;
use irrigo_core::schema::{parse_topic, EventPayload, StatusPayload, TelemetryPayload, TopicKind, INGEST_FILTERS};
use irrigo_mqtt::{MqttClient, QoS};

use crate::relay::Relay;
use crate::store::{Query, RecordKind, RecoveryReport, Store, StoreError, StoreOptions, StoreRecord};

/// Per-client backlog on the live stream before the client is cut off.
pub const SSE_BUFFER: usize = 1000;
pub const CONFIG_FILTER: &str = "farm/+/config";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub store: StoreOptions,
    /// Shared secret required in `x-irrigo-token` on write endpoints.
    pub token: Option<String>,
    /// Directory with dashboard assets served at `/`.
    pub static_dir: Option<PathBuf>,
    pub sse_buffer: usize,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { store: StoreOptions::new(data_dir), token: None, static_dir: None, sse_buffer: SSE_BUFFER }
    }
}

/// Result of handling one broker message.
#[derive(Debug, Clone, PartialEq)]
pub enum Ingested {
    Stored(StoreRecord),
    DeadLettered(String),
    /// A node config was observed; configs are tracked, not stored.
    Config,
    /// The store refused the write; ingestion is paused until it accepts one.
    Paused(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NodeView {
    pub id: String,
    pub online: Option<bool>,
    pub last_seen: Option<i64>,
    pub latest_ts: Option<i64>,
}

#[derive(Debug, Clone, Default)]
struct NodeState {
    online: Option<bool>,
    last_seen: Option<i64>,
    config: Option<NodeConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestStats {
    pub received: u64,
    pub stored: u64,
    pub dead_lettered: u64,
    /// Messages that arrived while the store was refusing writes.
    pub refused: u64,
}

pub(crate) struct Shared {
    pub(crate) store: Mutex<Store>,
    pub(crate) tx: broadcast::Sender<Arc<StoreRecord>>,
    pub(crate) relay: Arc<dyn Relay>,
    nodes: Mutex<BTreeMap<String, NodeState>>,
    paused: AtomicBool,
    stats: Mutex<IngestStats>,
    pub(crate) token: Option<String>,
    pub(crate) static_dir: Option<PathBuf>,
}

/// Cheap to clone; every clone shares the same store and stream.
#[derive(Clone)]
pub struct EdgeServer {
    pub(crate) shared: Arc<Shared>,
}

impl std::fmt::Debug for EdgeServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EdgeServer").field("store", &self.shared.store).finish()
    }
}

pub fn now_ms() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as i64).unwrap_or(0)
}

impl EdgeServer {
    pub fn new(cfg: ServerConfig, relay: Arc<dyn Relay>) -> Result<Self, StoreError> {
        let store = Store::open(cfg.store)?;
        let r = store.recovery();
        if r.skipped_lines > 0 {
            log::warn!("store recovery skipped {} line(s), trimmed {} byte(s)", r.skipped_lines, r.trimmed_bytes);
        }
        let (tx, _) = broadcast::channel(cfg.sse_buffer.max(1));
        Ok(Self {
            shared: Arc::new(Shared {
                store: Mutex::new(store),
                tx,
                relay,
                nodes: Mutex::new(BTreeMap::new()),
                paused: AtomicBool::new(false),
                stats: Mutex::new(IngestStats::default()),
                token: cfg.token,
                static_dir: cfg.static_dir,
            }),
        })
    }

    pub(crate) fn store(&self) -> MutexGuard<'_, Store> {
        self.shared.store.lock().expect("store lock")
    }

    fn nodes(&self) -> MutexGuard<'_, BTreeMap<String, NodeState>> {
        self.shared.nodes.lock().expect("node lock")
    }

    pub fn relay(&self) -> &Arc<dyn Relay> {
        &self.shared.relay
    }

    pub fn is_paused(&self) -> bool {
        self.shared.paused.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> IngestStats {
        self.shared.stats.lock().expect("stats lock").clone()
    }

    pub fn recovery(&self) -> RecoveryReport {
        self.store().recovery().clone()
    }

    pub fn record_count(&self) -> usize {
        self.store().record_count()
    }

    pub fn dead_letter_count(&self) -> usize {
        self.store().dead_letter_count()
    }

    /// Receiver for records as they are stored, in write order.
    pub fn subscribe(&self) -> broadcast::Receiver<Arc<StoreRecord>> {
        self.shared.tx.subscribe()
    }

    pub fn query(&self, q: &Query) -> Result<Vec<StoreRecord>, StoreError> {
        let snap = self.store().snapshot(q)?;
        snap.read()
    }

    pub fn latest(&self, node: &str, kind: RecordKind) -> Option<StoreRecord> {
        self.store().latest(node, kind).cloned()
    }

    pub fn node_views(&self) -> Vec<NodeView> {
        let store = self.store();
        let nodes = self.nodes();
        let mut ids: Vec<String> = store.nodes();
        ids.extend(nodes.keys().cloned());
        ids.sort();
        ids.dedup();
        ids.into_iter()
            .map(|id| {
                let st = nodes.get(&id).cloned().unwrap_or_default();
                let latest_ts = store.latest(&id, RecordKind::Telemetry).map(|r| r.ts);
                NodeView { online: st.online, last_seen: st.last_seen, latest_ts, id }
            })
            .collect()
    }

    pub fn is_known(&self, node: &str) -> bool {
        self.nodes().contains_key(node) || self.store().nodes().iter().any(|n| n == node)
    }

    /// Last config seen or set for the node; defaults otherwise.
    pub fn config(&self, node: &str) -> NodeConfig {
        self.nodes()
            .get(node)
            .and_then(|s| s.config.clone())
            .unwrap_or_else(|| NodeConfig { node_id: node.to_string(), ..NodeConfig::default() })
    }

    pub(crate) fn set_config(&self, node: &str, cfg: NodeConfig) {
        self.nodes().entry(node.to_string()).or_default().config = Some(cfg);
    }

    fn quarantine(&self, topic: &str, payload: &[u8], reason: String, recv: i64) -> Ingested {
        log::warn!("dead-letter {topic}: {reason}");
        let res = self.store().dead_letter(topic, payload, &reason, recv);
        let mut stats = self.shared.stats.lock().expect("stats lock");
        match res {
            Ok(()) => {
                stats.dead_lettered += 1;
                Ingested::DeadLettered(reason)
            }
            Err(e) => {
                stats.refused += 1;
                self.shared.paused.store(true, Ordering::SeqCst);
                Ingested::Paused(e.to_string())
            }
        }
    }

    /// Validates one broker message and stores it, quarantines it, or
    /// records it as node state.
    pub fn handle_message(&self, topic: &str, payload: &[u8], recv: i64) -> Ingested {
        self.shared.stats.lock().expect("stats lock").received += 1;
        let Some((node, kind)) = parse_topic(topic) else {
            return self.quarantine(topic, payload, "topic outside the schema".into(), recv);
        };
        let value: serde_json::Value = match serde_json::from_slice(payload) {
            Ok(v) => v,
            Err(e) => return self.quarantine(topic, payload, format!("malformed JSON: {e}"), recv),
        };
        let typed = |v: &serde_json::Value| -> Result<(RecordKind, i64, Option<String>), String> {
            let e = |e: serde_json::Error| e.to_string();
            Ok(match kind {
                TopicKind::Telemetry => {
                    let t: TelemetryPayload = serde_json::from_value(v.clone()).map_err(e)?;
                    (RecordKind::Telemetry, t.ts, Some(t.node))
                }
                TopicKind::Event => {
                    let t: EventPayload = serde_json::from_value(v.clone()).map_err(e)?;
                    (RecordKind::Event, t.ts, Some(t.node))
                }
                TopicKind::Status => {
                    let t: StatusPayload = serde_json::from_value(v.clone()).map_err(e)?;
                    (RecordKind::Status, t.ts.unwrap_or(recv), t.node)
                }
                TopicKind::Config | TopicKind::Cmd => unreachable!("handled below"),
            })
        };
        match kind {
            TopicKind::Config => {
                let base = NodeConfig { node_id: node.to_string(), ..NodeConfig::default() };
                return match base.merge_json(payload) {
                    Ok(cfg) if cfg.node_id == node => {
                        self.set_config(node, cfg);
                        Ingested::Config
                    }
                    Ok(_) => self.quarantine(topic, payload, "config node_id does not match topic".into(), recv),
                    Err(e) => self.quarantine(topic, payload, e.to_string(), recv),
                };
            }
            TopicKind::Cmd => return self.quarantine(topic, payload, "commands are not ingested".into(), recv),
            _ => {}
        }
        let (rkind, ts, claimed) = match typed(&value) {
            Ok(t) => t,
            Err(e) => return self.quarantine(topic, payload, format!("schema: {e}"), recv),
        };
        if claimed.as_deref().is_some_and(|c| c != node) {
            return self.quarantine(topic, payload, "payload node does not match topic".into(), recv);
        }
        {
            let mut nodes = self.nodes();
            let st = nodes.entry(node.to_string()).or_default();
            st.last_seen = Some(recv);
            if rkind == RecordKind::Status {
                st.online = value.get("online").and_then(|v| v.as_bool());
            } else if st.online.is_none() {
                st.online = Some(true);
            }
        }
        let rec = StoreRecord::new(rkind, node, ts, recv, value);
        let mut store = self.store();
        match store.append(rec) {
            Ok(rec) => {
                if self.shared.paused.swap(false, Ordering::SeqCst) {
                    log::info!("store accepting writes again; ingestion resumed");
                }
                self.shared.stats.lock().expect("stats lock").stored += 1;
                let _ = self.shared.tx.send(Arc::new(rec.clone()));
                Ingested::Stored(rec)
            }
            Err(e @ (StoreError::Full { .. } | StoreError::Io { .. })) => {
                if !self.shared.paused.swap(true, Ordering::SeqCst) {
                    log::error!("store refused a write, ingestion paused: {e}");
                }
                self.shared.stats.lock().expect("stats lock").refused += 1;
                Ingested::Paused(e.to_string())
            }
            Err(e) => {
                drop(store);
                self.quarantine(topic, payload, e.to_string(), recv)
            }
        }
    }

    /// Subscribes `client` to the node topics and feeds every delivery
    /// through [`EdgeServer::handle_message`] on a background thread.
    pub fn spawn_ingest(&self, client: Arc<MqttClient>) -> IngestLoop {
        for f in INGEST_FILTERS.iter().chain([&CONFIG_FILTER]) {
            client.subscribe(f, QoS::AtLeastOnce);
        }
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let server = self.clone();
        let thread = std::thread::Builder::new()
            .name("ingest".into())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    if let Some(p) = client.recv_timeout(Duration::from_millis(50)) {
                        server.handle_message(&p.topic, &p.payload, now_ms());
                    }
                }
            })
            .expect("spawn ingest thread");
        IngestLoop { stop, thread: Some(thread) }
    }
}

/// Stops the ingest thread when dropped.
pub struct IngestLoop {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl IngestLoop {
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for IngestLoop {
    fn drop(&mut self) {
        self.halt();
    }
}
