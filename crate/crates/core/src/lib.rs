//! Core of the irrigo stack: sensor preprocessing, synthetic data, tree
//! ensembles, the TML1 edge model format, the edge-node control loop and the
//! closed-loop field simulator.
//!
//! Everything in this crate is synchronous and I/O-light; the MQTT plane and
//! the edge server live in their own crates and talk to the node through the
//! [`edgenode::Uplink`] trait.

pub mod edgenode;
pub mod ensemble;
pub mod fieldsim;
pub mod schema;
pub mod synthdata;
pub mod telemetry;
pub mod tinymodel;

pub use telemetry::{CalibrationProfile, EdgeInputVector, FeatureVector14, SensorSample};

/// splitmix64 mix of a base seed and a stream index; used wherever work is
/// split into independently seeded parts (generator chunks, forest trees).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
