//! Seeded discrete-event simulator for QDBFT nodes.
//!
//! A run is a pure function of its [`SimConfig`]: one ChaCha stream drives
//! every latency sample and event ties break on a monotone sequence number.

pub mod config;
pub mod sim;

use thiserror::Error;

use qdbft_core::NodeId;

pub use config::{
    ComputeCharges, FaultEntry, FaultKind, LatencyModel, LinkOverride, MembershipAction, MembershipEvent, SimConfig,
    StopCondition, Workload,
};
pub use sim::{
    run, ClientRecord, DeliveryFilter, LogEntry, LogRecord, Reconfig, ReconfigKind, RunReport, SafetyViolation,
    Simulation, StopReason,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("stop condition not reached within {events} events (virtual time {time_us} us)")]
    NonQuiescent { events: u64, time_us: u64 },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node setup failed: {0}")]
    Node(String),
}
