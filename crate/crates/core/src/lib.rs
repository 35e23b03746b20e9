//! Kademlia broadcast with neighbor evaluation, plus a deterministic
//! discrete-event simulator to measure its latency and coverage against a
//! plain Kademlia broadcast and a gossip baseline.
//!
//! Module map:
//! - [`identity`]: node ids, XOR distance, bucket indexing
//! - [`routing`]: scored k-buckets and weighted relay selection
//! - [`protocol`]: broadcast state machines (returning send intents)
//! - [`netsim`]: event loop, bandwidth/delay model, churn and adversaries
//! - [`metrics`]: per-broadcast records, latency and coverage statistics
//! - [`experiments`]: scenario configs, experiment drivers, result files

pub mod experiments;
pub mod identity;
pub mod metrics;
pub mod netsim;
pub mod par;
pub mod protocol;
pub mod routing;

pub use identity::NodeId;
pub use netsim::{DisturbanceMode, NetworkConfig, Simulation};
pub use protocol::{KademliaBroadcast, KademliaParams};
