//! The whole system in one process: broker, ingest server and an edge node
//! driven by the field simulator, optionally with a broker outage.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use irrigo_core::edgenode::{EdgeNode, Inbound, IrrigationEvent, Mode, NodeError, NodeSummary, SensorSource, SimulatedSource, Uplink};
use irrigo_core::fieldsim::{run_policy_with_transcript, sim_node_config, Policy, ScenarioConfig, WaterReport};
use irrigo_core::schema::{topic, TopicKind};
use irrigo_core::tinymodel::EdgeModel;
use irrigo_mqtt::codec::QoS;
use irrigo_mqtt::{node_options, BrokerLimits, ClientOptions, MqttClient, StandaloneBroker};
use irrigo_server::{EdgeServer, NoRelay, Query, RecordKind, ServerConfig, StoreError};

use crate::gate::LinkGate;

/// Client-side bound on buffered QoS 1 messages.
pub const MAX_BUFFERED: usize = 1024;
/// While connected, the driver waits for the node's buffer to drain below
/// this before feeding the next sample.

#[derive(Debug, Error)]
pub enum StackError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BrokerMode {
    InProcess,
    None,
}

/// Broker outage as fractions of the run: killed before sample
/// `kill_at · n`, a fresh broker accepts the node again before sample
/// `restart_at · n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Outage {
    pub kill_at: f64,
    pub restart_at: f64,
}

#[derive(Debug, Clone)]
pub struct StackOptions {
    pub mode: Mode,
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub model: Option<EdgeModel>,
    /// Store directory; must be empty or absent.
    pub data_dir: PathBuf,
    pub broker: BrokerMode,
    pub outage: Option<Outage>,
    pub flush_timeout: Duration,
}

impl StackOptions {
    pub fn new(mode: Mode, model: Option<EdgeModel>, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            scenario: ScenarioConfig::default(),
            seed: 7,
            model,
            data_dir: data_dir.into(),
            broker: BrokerMode::InProcess,
            outage: None,
            flush_timeout: Duration::from_secs(20),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutageReport {
    pub kill_step: usize,
    pub restart_step: usize,
    pub events_while_offline: usize,
    pub max_buffered: usize,
    pub dropped_qos1: u64,
    pub dropped_qos0: u64,
    pub retransmits: u64,
    pub buffered_at_end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StackReport {
    pub policy: String,
    pub broker: BrokerMode,
    pub seed: u64,
    pub water: WaterReport,
    pub node: NodeSummary,
    pub node_events: usize,
    pub telemetry_stored: usize,
    pub events_stored: usize,
    pub duplicate_events: usize,
    pub outage: Option<OutageReport>,
    pub checks: Vec<Check>,
}

impl StackReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

#[derive(Debug)]
pub struct StackRun {
    pub report: StackReport,
    pub transcript: Vec<String>,
    pub events: Vec<IrrigationEvent>,
}

/// Lets the driver keep a handle on the node's client.
struct SharedClient(Arc<MqttClient>);

impl Uplink for SharedClient {
    fn publish(&mut self, topic: &str, payload: &[u8], qos: u8, retain: bool) {
        let q = if qos == 0 { QoS::AtMostOnce } else { QoS::AtLeastOnce };
        self.0.publish(topic, payload, q, retain);
    }

    fn poll_inbound(&mut self) -> Vec<Inbound> {
        self.0.drain().into_iter().map(|p| Inbound { topic: p.topic, payload: p.payload }).collect()
    }

    fn is_connected(&self) -> bool {
        self.0.is_connected()
    }
}

fn wait_for(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let t = Instant::now();
    loop {
        if f() {
            return true;
        }
        if t.elapsed() >= limit {
            return false;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}

/// [`wait_for`] with a short poll, for waits on the per-decision path.
fn spin_until(limit: Duration, mut f: impl FnMut() -> bool) -> bool {
    let t = Instant::now();
    while !f() {
        if t.elapsed() >= limit {
            return false;
        }
        std::thread::sleep(Duration::from_micros(50));
    }
    true
}

fn decision_lines(transcript: &[String]) -> Vec<&str> {
    transcript.iter().map(String::as_str).filter(|l| !l.starts_with("[Status]")).collect()
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check { name, passed, detail: detail.into() }
}

struct Live {
    broker: Option<StandaloneBroker>,
    node_gate: LinkGate,
    server_gate: LinkGate,
    server_client: Arc<MqttClient>,
    node_client: Arc<MqttClient>,
}

impl Live {
    fn start(node_id: &str) -> Result<Self, StackError> {
        let broker = StandaloneBroker::start("127.0.0.1:0", BrokerLimits::default())?;
        let node_gate = LinkGate::start(broker.local_addr())?;
        let server_gate = LinkGate::start(broker.local_addr())?;
        let fast = |o: ClientOptions| ClientOptions { backoff_initial_ms: 100, backoff_max_ms: 100, ..o };
        let server_client =
            MqttClient::connect(&server_gate.local_addr().to_string(), fast(ClientOptions::new("edge-server")), Duration::from_secs(5))
                .map_err(|e| StackError::Setup(format!("server client: {e}")))?;
        let node_client = MqttClient::start(&node_gate.local_addr().to_string(), fast(node_options(node_id)))
            .map_err(|e| StackError::Setup(format!("node client: {e}")))?;
        node_client.subscribe(&topic(node_id, TopicKind::Cmd), QoS::AtLeastOnce);
        node_client.subscribe(&topic(node_id, TopicKind::Config), QoS::AtLeastOnce);
        if !node_client.wait_connected(Duration::from_secs(5)) {
            return Err(StackError::Setup("node client did not connect".into()));
        }
        Ok(Self {
            broker: Some(broker),
            node_gate,
            server_gate,
            server_client: Arc::new(server_client),
            node_client: Arc::new(node_client),
        })
    }

    fn kill_broker(&mut self) {
        self.node_gate.set_open(false);
        self.server_gate.set_open(false);
        if let Some(b) = self.broker.take() {
            b.kill();
        }
        self.node_gate.cut();
        self.server_gate.cut();
        wait_for(Duration::from_secs(5), || !self.node_client.is_connected() && !self.server_client.is_connected());
    }

    /// Starts a fresh broker; the server resubscribes before the node may
    /// reconnect, so nothing the node flushes goes unheard. Returns once
    /// both are connected again.
    fn restart_broker(&mut self) -> Result<(), StackError> {
        let b = StandaloneBroker::start("127.0.0.1:0", BrokerLimits::default())?;
        self.node_gate.set_upstream(b.local_addr());
        self.server_gate.set_upstream(b.local_addr());
        self.broker = Some(b);
        self.server_gate.set_open(true);
        if !wait_for(Duration::from_secs(5), || self.server_client.is_connected()) {
            return Err(StackError::Setup("server did not reconnect".into()));
        }
        std::thread::sleep(Duration::from_millis(200));
        self.node_gate.set_open(true);
        if !wait_for(Duration::from_secs(5), || self.node_client.is_connected()) {
            return Err(StackError::Setup("node did not reconnect".into()));
        }
        Ok(())
    }
}

/// Runs the node policy through the stack and checks it against an offline
/// run of the same seed.
pub fn run_stack(opts: &StackOptions) -> Result<StackRun, StackError> {
    opts.scenario.validate().map_err(StackError::Setup)?;
    if opts.data_dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(StackError::Setup(format!("store directory {} is not empty", opts.data_dir.display())));
    }
    let ncfg = sim_node_config(opts.mode, &opts.scenario);
    let node_id = ncfg.node_id.clone();
    let policy = Policy::Node { cfg: Box::new(ncfg.clone()), model: opts.model.clone() };
    let reference = run_policy_with_transcript(&policy, &opts.scenario, opts.seed)?;
    let mut offline = EdgeNode::new(ncfg.clone(), opts.model.clone())?;
    offline.keep_transcript(false);
    offline.run(&mut SimulatedSource::new(opts.scenario, opts.seed))?;

    let mut live = match opts.broker {
        BrokerMode::InProcess => Some(Live::start(&node_id)?),
        BrokerMode::None => None,
    };
    let server_cfg = ServerConfig::new(&opts.data_dir);
    let (server, ingest) = match &live {
        Some(l) => {
            let s = EdgeServer::new(server_cfg, l.server_client.clone())?;
            let ingest = s.spawn_ingest(l.server_client.clone());
            // let the ingest subscriptions land before the node talks
            std::thread::sleep(Duration::from_millis(200));
            (s, Some(ingest))
        }
        None => (EdgeServer::new(server_cfg, Arc::new(NoRelay))?, None),
    };

    let mut node = EdgeNode::new(ncfg, opts.model.clone())?;
    node.keep_transcript(true);
    if let Some(l) = &live {
        node = node.with_uplink(Box::new(SharedClient(l.node_client.clone())));
    }
    node.announce(0);

    let count_stored = |kind| server.query(&Query::new(node_id.as_str()).kind(kind)).map(|r| r.len()).unwrap_or(0);
    let unique_events = || -> Vec<irrigo_server::StoreRecord> {
        server
            .query(&Query::new(node_id.as_str()).kind(RecordKind::Event))
            .map(|r| r.into_iter().filter(|r| !r.dup).collect())
            .unwrap_or_default()
    };
    // each decision publishes one telemetry message; every event is published
    let settled = |l: &Live, node: &EdgeNode| {
        l.node_client.buffered() == 0
            && unique_events().len() >= node.events().len()
            && count_stored(RecordKind::Telemetry) + l.node_client.stats().dropped_qos0 as usize >= node.summary().decisions
    };

    let n = opts.scenario.n_steps();
    let steps = opts.outage.map(|o| ((o.kill_at * n as f64) as usize, (o.restart_at * n as f64) as usize));
    let mut src = SimulatedSource::new(opts.scenario, opts.seed);
    let (mut k, mut offline_events, mut max_buffered) = (0usize, 0usize, 0usize);
    while let Some(sample) = src.next_sample() {
        let sample = sample.map_err(NodeError::from)?;
        if let (Some(l), Some((kill, restart))) = (live.as_mut(), steps) {
            if k == kill {
                // a crashed broker loses what it holds; quiesce first so the
                // run measures the node's own buffer
                wait_for(opts.flush_timeout, || settled(l, &node));
                l.kill_broker();
            }
            if k == restart {
                l.restart_broker()?;
            }
        }
        let out = node.process_sample(sample)?;
        let ml = out.dispensed_ml();
        if ml > 0.0 {
            src.apply_dispense(ml);
        }
        if let Some(l) = &live {
            if steps.is_some_and(|(a, b)| (a..b).contains(&k)) {
                offline_events += out.events().count();
            }
            max_buffered = max_buffered.max(l.node_client.buffered());
            if out.decision.is_some() && l.node_client.is_connected() {
                spin_until(Duration::from_secs(5), || l.node_client.buffered() == 0 || !l.node_client.is_connected());
            }
        }
        k += 1;
    }

    let node_events = node.events().to_vec();
    if let Some(l) = &live {
        wait_for(opts.flush_timeout, || settled(l, &node));
    }
    let stored_events = unique_events();
    let telemetry_stored = count_stored(RecordKind::Telemetry);
    let events_stored = count_stored(RecordKind::Event);

    let mut checks = vec![
        check(
            "decisions_match_offline",
            node_events == offline.events(),
            format!("{} events live, {} offline", node_events.len(), offline.events().len()),
        ),
        check(
            "transcript_matches_offline",
            decision_lines(node.transcript()) == decision_lines(&reference.node_transcript),
            format!("{} decision lines", decision_lines(node.transcript()).len()),
        ),
        check(
            "water_report_consistent",
            (node.summary().total_ml - reference.report.total_ml).abs() < 1e-6,
            format!("node {:.1} ml, report {:.1} ml", node.summary().total_ml, reference.report.total_ml),
        ),
    ];
    let mut outage = None;
    match &live {
        Some(l) => {
            let dropped = l.node_client.stats().dropped_qos0 as usize;
            checks.push(check(
                "telemetry_accounted",
                telemetry_stored + dropped == node.summary().decisions,
                format!("{telemetry_stored} stored + {dropped} dropped while offline of {} sent", node.summary().decisions),
            ));
            checks.push(check(
                "events_persisted",
                stored_events.len() == node_events.len(),
                format!(
                    "{} of {} events stored, {} duplicates",
                    stored_events.len(),
                    node_events.len(),
                    events_stored - stored_events.len()
                ),
            ));
            let stored_ts: Vec<i64> = stored_events.iter().map(|r| r.ts).collect();
            let node_ts: Vec<i64> = node_events.iter().map(|e| e.ts_ms).collect();
            checks.push(check("stored_events_match_node", stored_ts == node_ts, "event timestamps compared one to one"));
            let in_order = stored_events.windows(2).all(|w| w[0].recv <= w[1].recv);
            checks.push(check("events_arrived_in_order", in_order, "receive times non-decreasing in event order"));
            if let Some((kill, restart)) = steps {
                let stats = l.node_client.stats();
                let r = OutageReport {
                    kill_step: kill,
                    restart_step: restart,
                    events_while_offline: offline_events,
                    max_buffered,
                    dropped_qos1: stats.dropped,
                    dropped_qos0: stats.dropped_qos0,
                    retransmits: stats.retransmits,
                    buffered_at_end: l.node_client.buffered(),
                };
                checks.push(check(
                    "offline_buffer_bounded",
                    r.max_buffered <= MAX_BUFFERED && r.dropped_qos1 == 0,
                    format!("peak {} buffered, {} dropped", r.max_buffered, r.dropped_qos1),
                ));
                checks.push(check(
                    "offline_buffer_flushed",
                    r.buffered_at_end == 0 && r.events_while_offline > 0,
                    format!("{} events produced offline, {} left buffered", r.events_while_offline, r.buffered_at_end),
                ));
                outage = Some(r);
            }
        }
        None => {
            checks.push(check("server_records_nothing", server.record_count() == 0, format!("{} records", server.record_count())));
        }
    }
    if let Some(i) = ingest {
        i.stop();
    }
    if let Some(l) = live.as_mut() {
        l.broker.take();
    }

    let report = StackReport {
        policy: reference.report.policy.clone(),
        broker: opts.broker,
        seed: opts.seed,
        water: reference.report,
        node: node.summary().clone(),
        node_events: node_events.len(),
        telemetry_stored,
        events_stored,
        duplicate_events: events_stored - stored_events.len(),
        outage,
        checks,
    };
    Ok(StackRun { report, transcript: node.transcript().to_vec(), events: node_events })
}
