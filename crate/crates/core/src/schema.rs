//! MQTT topic layout and JSON payload contracts shared by nodes, the server
//! and the dashboard.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOPIC_ROOT: &str = "farm";

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("invalid node id {0:?}: expected 1-32 chars of [a-z0-9_-]")]
    InvalidNodeId(String),
    #[error("invalid payload: {0}")]
    Payload(String),
}

pub fn validate_node_id(id: &str) -> Result<(), SchemaError> {
    let ok = (1..=32).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(SchemaError::InvalidNodeId(id.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicKind {
    Telemetry,
    Event,
    Cmd,
    Config,
    Status,
}

impl TopicKind {
    /// QoS level the contract assigns to the topic.
    pub fn qos(self) -> u8 {
        match self {
            TopicKind::Telemetry => 0,
            _ => 1,
        }
    }

    pub fn retained(self) -> bool {
        matches!(self, TopicKind::Config | TopicKind::Status)
    }
}

pub fn topic(node_id: &str, kind: TopicKind) -> String {
    match kind {
        TopicKind::Telemetry => format!("{TOPIC_ROOT}/{node_id}/telemetry"),
        TopicKind::Event => format!("{TOPIC_ROOT}/{node_id}/event/irrigation"),
        TopicKind::Cmd => format!("{TOPIC_ROOT}/{node_id}/cmd"),
        TopicKind::Config => format!("{TOPIC_ROOT}/{node_id}/config"),
        TopicKind::Status => format!("{TOPIC_ROOT}/{node_id}/status"),
    }
}

/// Splits a concrete topic into `(node_id, kind)`; `None` for topics
/// outside the schema.
pub fn parse_topic(topic: &str) -> Option<(&str, TopicKind)> {
    let rest = topic.strip_prefix(TOPIC_ROOT)?.strip_prefix('/')?;
    let (node, tail) = rest.split_once('/')?;
    validate_node_id(node).ok()?;
    let kind = match tail {
        "telemetry" => TopicKind::Telemetry,
        "event/irrigation" => TopicKind::Event,
        "cmd" => TopicKind::Cmd,
        "config" => TopicKind::Config,
        "status" => TopicKind::Status,
        _ => return None,
    };
    Some((node, kind))
}

/// Subscriptions used by the server's ingest loop.
pub const INGEST_FILTERS: [&str; 3] = ["farm/+/telemetry", "farm/+/event/#", "farm/+/status"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryPayload {
    pub ts: i64,
    pub node: String,
    pub soil_adc: f64,
    pub soil_n: f64,
    pub dryness_pct: i32,
    pub temp_c: f64,
    pub hum_pct: f64,
    pub light_lux: f64,
    #[serde(default)]
    pub ph: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Model,
    Rule,
    Manual,
}

impl Trigger {
    pub fn as_str(self) -> &'static str {
        match self {
            Trigger::Model => "model",
            Trigger::Rule => "rule",
            Trigger::Manual => "manual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    InWater,
    BelowMin,
    Cooldown,
    Paused,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::InWater => "in_water",
            SkipReason::BelowMin => "below_min",
            SkipReason::Cooldown => "cooldown",
            SkipReason::Paused => "paused",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPayload {
    pub ts: i64,
    pub node: String,
    pub predicted_ml: f64,
    pub dispensed_ml: f64,
    pub duration_ms: u64,
    pub trigger: Trigger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped_reason: Option<SkipReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    IrrigateNow {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ml: Option<f64>,
    },
    Pause,
    Resume,
}

impl Command {
    pub fn parse(bytes: &[u8]) -> Result<Self, SchemaError> {
        let cmd: Self = serde_json::from_slice(bytes).map_err(|e| SchemaError::Payload(e.to_string()))?;
        if let Command::IrrigateNow { ml: Some(ml) } = cmd {
            if !(ml.is_finite() && ml > 0.0) {
                return Err(SchemaError::Payload(format!("ml must be positive, got {ml}")));
            }
        }
        Ok(cmd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusPayload {
    pub online: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<i64>,
}
