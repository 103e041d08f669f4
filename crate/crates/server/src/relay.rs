//! Outbound path from the HTTP API to the nodes.

use std::sync::Mutex;

use thiserror::Error;

use irrigo_mqtt::{MqttClient, QoS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RelayError {
    #[error("no broker link configured")]
    Unavailable,
}

/// Publishes commands and configs toward the nodes, always at QoS 1.
pub trait Relay: Send + Sync {
    fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> Result<(), RelayError>;
    fn is_connected(&self) -> bool;
}

/// For a server running without a broker.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoRelay;

impl Relay for NoRelay {
    fn publish(&self, _: &str, _: &[u8], _: bool) -> Result<(), RelayError> {
        Err(RelayError::Unavailable)
    }

    fn is_connected(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relayed {
    pub topic: String,
    pub payload: Vec<u8>,
    pub retain: bool,
}

/// Keeps every publish in memory.
#[derive(Debug, Default)]
pub struct MemoryRelay {
    log: Mutex<Vec<Relayed>>,
}

impl MemoryRelay {
    pub fn published(&self) -> Vec<Relayed> {
        self.log.lock().expect("relay lock").clone()
    }
}

impl Relay for MemoryRelay {
    fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> Result<(), RelayError> {
        self.log.lock().expect("relay lock").push(Relayed { topic: topic.into(), payload: payload.to_vec(), retain });
        Ok(())
    }

    fn is_connected(&self) -> bool {
        true
    }
}

impl Relay for MqttClient {
    /// Never fails: while the link is down the client buffers the message.
    fn publish(&self, topic: &str, payload: &[u8], retain: bool) -> Result<(), RelayError> {
        MqttClient::publish(self, topic, payload, QoS::AtLeastOnce, retain);
        Ok(())
    }

    fn is_connected(&self) -> bool {
        MqttClient::is_connected(self)
    }
}
