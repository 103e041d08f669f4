//! A small MQTT 3.1.1 broker and client (QoS 0 and 1) for the farm LAN.
//!
//! The protocol logic lives in sans-I/O state machines ([`broker::BrokerCore`],
//! [`session::ClientSession`]); [`server`] and [`client`] wrap them in tokio
//! and blocking-thread transports.

pub mod broker;
pub mod client;
pub mod codec;
pub mod server;
pub mod session;
pub mod sim;
pub mod topic;

pub use broker::{BrokerCore, BrokerLimits};
pub use client::{node_client, node_options, MqttClient};
pub use codec::{decode, encode, Packet, Publish, QoS};
pub use server::{BrokerHandle, StandaloneBroker};
pub use session::{ClientOptions, ClientSession};
pub use topic::topic_matches;

pub const DEFAULT_PORT: u16 = 1883;
