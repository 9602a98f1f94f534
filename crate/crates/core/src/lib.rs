//! Simulator of cooperative (device-to-device assisted) update broadcast in a
//! single-gateway LoRaWAN cell, with fixed-SF and multi-SF multicast
//! baselines.

pub mod coding;
pub mod config;
pub mod engine;
pub mod error;
pub mod frame;
pub mod interference;
pub mod metrics;
pub mod phy;
pub mod protocol;
pub mod scenario;
pub mod scheduler;

pub use config::{LambdaRange, SimConfig};
pub use engine::{run_once, run_once_traced, run_replications, EdResult, RunResult, Trace};
pub use error::{Error, Result};
pub use protocol::Scheme;
pub use scenario::{Scenario, ScenarioRun, Sweep, SweepAxis};
