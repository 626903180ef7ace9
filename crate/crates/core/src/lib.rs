//! Common-pool resource simulation with language-model agents.

pub mod agent;
pub mod dynamics;
pub mod engine;
pub mod gateway;
pub mod metrics;
pub mod scenario;
pub mod store;
