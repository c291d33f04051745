//! Protocol core for a mixnet-backed decentralized federated learning node.
//!
//! Every node is both a learner and a mix relay. Model updates are cut into
//! fixed-size fragments, wrapped in layered onion packets of constant length,
//! pushed through a per-node shuffling outbox that pads with cover traffic,
//! and aggregated on arrival without any sender identity.
//!
//! The crate is `no_std` (with `alloc`) and performs no IO: nodes are
//! event-driven state machines ([`node::Node`]) that a transport drives with
//! packets, heartbeats and clock ticks. The `mixfed` crate provides the
//! deterministic simulator, the TCP transport, file formats and the CLI.
//!
//! Module map:
//!
//! * [`onion`]: layered packets, peeling, single-use reply blocks.
//! * [`mixer`]: FIFO queue, shuffled outbox, interval sampling, cover.
//! * [`overlay`]: topology view, path selection, ACK tracking, churn.
//! * [`learning`]: model, training, fragmentation, fragment FedAvg.
//! * [`metrics`]: observation log and unlinkability metrics.
//! * [`node`]: the composed node state machine.
//! * [`seed`]: sub-seed derivation.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod clock;
pub mod id;
pub mod learning;
pub mod metrics;
pub mod mixer;
pub mod node;
pub mod onion;
pub mod overlay;
pub mod seed;

pub use clock::Nanos;
pub use id::NodeId;
