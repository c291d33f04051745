//! Simulator, TCP transport, experiments, manager and CLI around
//! [`mixfed_core`].

pub mod config;
pub mod experiments;
pub mod export;
pub mod live;
pub mod manager;
pub mod sim;
pub mod tcp;
pub mod world;
