//! Local training, fragmentation and identity-free aggregation.
//!
//! A node flattens its model into one vector, cuts it into contiguous
//! fragments tagged only with an epoch and an index range, and averages
//! whatever fragments arrive coordinate by coordinate, keeping its own
//! value wherever nothing arrived.

mod aggregate;
mod data;
mod fragment;
mod model;

pub use aggregate::{fragment_fedavg, plain_fedavg, AggregateError, CoverageStats, RoundAccumulator};
pub use data::{dirichlet_partition, Dataset, PartitionError, TaskSpec};
pub use fragment::{fragment_model, reassemble, Fragment, FragmentBuffer, FragmentDecodeError, ELEMENT_BYTES};
pub use model::{evaluate, local_train, Evaluation, Mlp, ModelVector};
