//! Seeded runs with randomized Byzantine and crash faults, at most `f`
//! faulty members per run.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use qdbft_core::consensus::quorum::fault_bound;
use qdbft_core::consensus::EventKind;
use qdbft_core::NodeId;
use qdbft_simnet::{FaultEntry, FaultKind, LatencyModel, LogEntry, SimConfig, Simulation, StopCondition, Workload};

use crate::HarnessError;

#[derive(Debug, Clone, Serialize)]
pub struct SafetyRun {
    pub n: usize,
    pub seed: u64,
    pub faults: Vec<FaultEntry>,
    /// Largest one-way link delay, base plus jitter.
    pub latency_ms: u64,
    pub violations: usize,
    pub submitted: usize,
    pub accepted: usize,
    pub max_latency_us: Option<u64>,
    pub bound_us: u64,
    /// Set when a silent primary was actually skipped: whether a block
    /// committed after the first missing-primary report.
    pub failover: Option<bool>,
    pub events: u64,
}

impl SafetyRun {
    pub fn safe(&self) -> bool {
        self.violations == 0
    }

    pub fn live(&self) -> bool {
        self.accepted == self.submitted
            && self.max_latency_us.is_none_or(|l| l <= self.bound_us)
            && self.failover != Some(false)
    }
}

/// Draws `1..=f` distinct faulty members with random kinds and windows.
pub fn random_script(n: usize, rng: &mut ChaCha8Rng) -> Vec<FaultEntry> {
    let f = fault_bound(n);
    let k = rng.gen_range(1..=f.max(1));
    let mut ids: Vec<u64> = (1..=n as u64).collect();
    ids.shuffle(rng);
    ids.truncate(k);
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let kind = *FaultKind::BYZANTINE.choose(rng).expect("non-empty");
            let from_ms = rng.gen_range(0..3000);
            let until_ms = (kind == FaultKind::Crash && rng.gen_bool(0.5)).then(|| from_ms + rng.gen_range(500..8000));
            FaultEntry { node: NodeId(id), kind, from_ms, until_ms }
        })
        .collect()
}

pub fn safety_config(n: usize, seed: u64) -> SimConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 40));
    let faults = random_script(n, &mut rng);
    let latency =
        LatencyModel { base_ms: rng.gen_range(1..=20), jitter_ms: rng.gen_range(0..=5), ..LatencyModel::default() };
    let mut cfg = SimConfig {
        nodes: n,
        seed,
        latency,
        faults,
        workload: Workload { clients: 1, requests_per_client: 20, interval_ms: 100, ..Workload::default() },
        stop: StopCondition { max_height: None, max_time_ms: Some(600_000), until_clients_done: true },
        ..SimConfig::default()
    };
    cfg.node.batch_limit = 4;
    cfg
}

pub fn safety_run(cfg: SimConfig) -> Result<SafetyRun, HarnessError> {
    let latency_ms = cfg.latency.base_ms + cfg.latency.jitter_ms;
    let bound_us = 10 * (cfg.node.delta_t_ms + 3 * latency_ms) * 1000;
    let (n, seed, faults) = (cfg.nodes, cfg.seed, cfg.faults.clone());
    let silent: Vec<NodeId> = faults.iter().filter(|f| f.kind == FaultKind::SilentPrimary).map(|f| f.node).collect();
    let mut sim = Simulation::new(cfg)?;
    let report = sim.run()?;
    let first_missing = sim.log().iter().find_map(|r| match &r.entry {
        LogEntry::Node { node, event }
            if event.kind == EventKind::PrimaryMissing && !sim.is_byzantine(*node) && !silent.is_empty() =>
        {
            Some(r.t_us)
        }
        _ => None,
    });
    let failover = first_missing.map(|t| report.commit_times_us.iter().any(|(_, c)| *c > t));
    Ok(SafetyRun {
        n,
        seed,
        faults,
        latency_ms,
        violations: report.violations.len(),
        submitted: report.requests.len(),
        accepted: report.committed_requests(),
        max_latency_us: report.requests.iter().filter_map(|r| r.latency_us).max(),
        bound_us,
        failover,
        events: report.events,
    })
}

/// `runs` seeded runs at `n` members, executed in parallel.
pub fn run_safety_suite(n: usize, runs: usize, base_seed: u64) -> Result<Vec<SafetyRun>, HarnessError> {
    (0..runs as u64).into_par_iter().map(|i| safety_run(safety_config(n, base_seed + i))).collect()
}
