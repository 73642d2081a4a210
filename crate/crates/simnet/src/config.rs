//! Simulation configuration, loadable from JSON.
//!
//! Times in the file are milliseconds; the engine runs in microseconds.

use serde::{Deserialize, Serialize};

use qdbft_core::consensus::NodeConfig;
use qdbft_core::ring::Placement;
use qdbft_core::NodeId;

use crate::SimError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Initial members get ids `1..=nodes`.
    pub nodes: usize,
    pub virtual_count: u32,
    pub placement: Placement,
    pub seed: u64,
    pub latency: LatencyModel,
    pub compute: ComputeCharges,
    pub node: NodeConfig,
    pub faults: Vec<FaultEntry>,
    pub membership: Vec<MembershipEvent>,
    pub workload: Workload,
    pub stop: StopCondition,
    /// Events processed before a run is declared non-quiescent.
    pub event_budget: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            nodes: 4,
            virtual_count: qdbft_core::ring::DEFAULT_VIRTUAL_COUNT,
            placement: Placement::Equidistant,
            seed: 42,
            latency: LatencyModel::default(),
            compute: ComputeCharges::default(),
            node: NodeConfig::default(),
            faults: Vec::new(),
            membership: Vec::new(),
            workload: Workload::default(),
            stop: StopCondition::default(),
            event_budget: 20_000_000,
        }
    }
}

impl SimConfig {
    pub fn from_json(s: &str) -> Result<SimConfig, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::ConfigInvalid(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn initial_ids(&self) -> Vec<NodeId> {
        (1..=self.nodes as u64).map(NodeId).collect()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::ConfigInvalid(m.to_string()));
        if self.nodes == 0 {
            return bad("nodes must be at least 1");
        }
        if self.virtual_count == 0 {
            return bad("virtual_count must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.latency.drop_rate) {
            return bad("drop_rate must lie in [0, 1]");
        }
        for l in &self.latency.links {
            if !(0.0..=1.0).contains(&l.drop_rate) {
                return bad("link drop_rate must lie in [0, 1]");
            }
        }
        if self.node.delta_t_ms == 0 || self.node.liveness_tick_ms == 0 {
            return bad("delta_t_ms and liveness_tick_ms must be positive");
        }
        if self.node.batch_limit == 0 {
            return bad("batch_limit must be positive");
        }
        for f in &self.faults {
            if f.until_ms.is_some_and(|u| u < f.from_ms) {
                return bad("fault window ends before it starts");
            }
        }
        if self.stop.max_height.is_none() && self.stop.max_time_ms.is_none() && !self.stop.until_clients_done {
            return bad("no stop condition");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub base_ms: u64,
    pub jitter_ms: u64,
    pub drop_rate: f64,
    /// Deliver in send order on each directed link.
    pub fifo: bool,
    pub links: Vec<LinkOverride>,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { base_ms: 0, jitter_ms: 0, drop_rate: 0.0, fifo: true, links: Vec::new() }
    }
}

impl LatencyModel {
    pub fn fixed(ms: u64) -> Self {
        LatencyModel { base_ms: ms, ..Self::default() }
    }

    /// `(base, jitter, drop)` for a directed link.
    pub fn link(&self, src: NodeId, dst: NodeId) -> (u64, u64, f64) {
        self.links
            .iter()
            .find(|l| l.src == src && l.dst == dst)
            .map(|l| (l.base_ms, l.jitter_ms, l.drop_rate))
            .unwrap_or((self.base_ms, self.jitter_ms, self.drop_rate))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOverride {
    pub src: NodeId,
    pub dst: NodeId,
    pub base_ms: u64,
    pub jitter_ms: u64,
    #[serde(default)]
    pub drop_rate: f64,
}

/// Per-operation processing time charged to a node, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComputeCharges {
    pub toeplitz_tag_ns: u64,
    pub hmac_tag_ns: u64,
    pub sign_ns: u64,
    pub verify_ns: u64,
}

impl Default for ComputeCharges {
    fn default() -> Self {
        ComputeCharges { toeplitz_tag_ns: 3_000, hmac_tag_ns: 1_000, sign_ns: 100_000, verify_ns: 50_000 }
    }
}

impl ComputeCharges {
    pub fn zero() -> Self {
        ComputeCharges { toeplitz_tag_ns: 0, hmac_tag_ns: 0, sign_ns: 0, verify_ns: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Honest,
    /// Stops at `from_ms`; restarts at `until_ms` if given.
    Crash,
    SilentPrimary,
    Equivocate,
    BadTags,
    Repudiate,
    StaleTable,
}

impl FaultKind {
    pub const BYZANTINE: [FaultKind; 6] = [
        FaultKind::Crash,
        FaultKind::SilentPrimary,
        FaultKind::Equivocate,
        FaultKind::BadTags,
        FaultKind::Repudiate,
        FaultKind::StaleTable,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub node: NodeId,
    pub kind: FaultKind,
    #[serde(default)]
    pub from_ms: u64,
    #[serde(default)]
    pub until_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum MembershipAction {
    /// A node outside the table asks to join.
    Join { node: NodeId },
    /// A member leaves voluntarily.
    Exit { node: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipEvent {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: MembershipAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Workload {
    pub clients: usize,
    pub requests_per_client: usize,
    pub start_ms: u64,
    /// Gap between a client's submissions; 0 submits everything at start.
    pub interval_ms: u64,
    pub operation_bytes: usize,
    /// Client resubmission timeout; defaults to the node's ΔT.
    pub timeout_ms: Option<u64>,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            clients: 1,
            requests_per_client: 10,
            start_ms: 0,
            interval_ms: 0,
            operation_bytes: 16,
            timeout_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StopCondition {
    /// Stop once every honest member's tip reaches this height.
    pub max_height: Option<u64>,
    pub max_time_ms: Option<u64>,
    /// Stop once every submitted request is accepted and no scripted
    /// event is outstanding.
    pub until_clients_done: bool,
}

impl Default for StopCondition {
    fn default() -> Self {
        StopCondition { max_height: None, max_time_ms: Some(600_000), until_clients_done: true }
    }
}
