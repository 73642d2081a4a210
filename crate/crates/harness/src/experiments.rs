//! Simulation-backed experiments. Every number here is in virtual time
//! and regenerates exactly from the config and seed.

use rayon::prelude::*;

use qdbft_core::auth::TagMode;
use qdbft_core::NodeId;
use qdbft_simnet::{
    ComputeCharges, FaultEntry, FaultKind, LatencyModel, MembershipAction, MembershipEvent, ReconfigKind, RunReport,
    SimConfig, Simulation, StopCondition, Workload,
};

use crate::{
    run_auth_bench, AuthBenchRecord, Check, Experiment, ExperimentConfig, FaultScript, HarnessError, MetricsRecord,
};

/// Requests per block in the sweeps.
const BATCH: usize = 100;

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub records: Vec<MetricsRecord>,
    pub auth: Vec<AuthBenchRecord>,
    pub checks: Vec<Check>,
    /// `(run name, NDJSON event log)` when logs were requested.
    pub logs: Vec<(String, String)>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    cfg.validate()?;
    match cfg.experiment {
        Experiment::KeyAudit => run_key_audit(cfg),
        Experiment::AuthBench => Ok(run_auth_bench(cfg)),
        Experiment::TpsSweep | Experiment::LatencySweep | Experiment::BaselineStatic => run_consensus_sweep(cfg),
        Experiment::Membership => run_membership_bench(cfg),
    }
}

/// A saturated fault-free run: enough requests queued at t = 0 to fill
/// `blocks + 2` full batches, stopping once every honest tip reaches `blocks`.
pub fn sweep_config(n: usize, latency_ms: u64, mode: TagMode, blocks: u64, seed: u64) -> SimConfig {
    let mut cfg = SimConfig {
        nodes: n,
        seed,
        latency: LatencyModel::fixed(latency_ms),
        workload: Workload {
            clients: 1,
            requests_per_client: (blocks as usize + 2) * BATCH,
            interval_ms: 0,
            ..Workload::default()
        },
        stop: StopCondition { max_height: Some(blocks), max_time_ms: Some(3_600_000), until_clients_done: false },
        ..SimConfig::default()
    };
    cfg.node.tag_mode = mode;
    cfg.node.batch_limit = BATCH;
    cfg
}

fn apply_script(sim: &mut SimConfig, script: &FaultScript) {
    let n = sim.nodes as u64;
    sim.faults.extend(script.faults.iter().filter(|f| f.node.0 <= n).cloned());
    sim.membership.extend(script.membership.iter().copied());
}

struct Measured {
    report: RunReport,
    tps: f64,
    round_ms: f64,
    keys: u64,
    log: Option<String>,
}

/// Rounds before this height carry the initial request backlog.
const WARMUP: u64 = 2;

fn measure(cfg: SimConfig, keep_log: bool) -> Result<Measured, HarnessError> {
    let mut sim = Simulation::new(cfg)?;
    let report = sim.run()?;
    let durations = report.round_durations_us(WARMUP);
    let round_ms = if durations.is_empty() {
        f64::NAN
    } else {
        durations.iter().sum::<u64>() as f64 / durations.len() as f64 / 1000.0
    };
    let tps = throughput(&sim, &report);
    let keys = sim.transmit_commit_keys(2);
    let log = keep_log.then(|| sim.log_ndjson());
    Ok(Measured { report, tps, round_ms, keys, log })
}

/// Approved requests per simulated second from the first commit at or
/// above `WARMUP` to the last commit of the run.
fn throughput(sim: &Simulation, report: &RunReport) -> f64 {
    let first = report.commit_times_us.iter().find(|(h, _)| *h >= WARMUP);
    let (Some(first), Some(last)) = (first, report.commit_times_us.last()) else {
        return 0.0;
    };
    let Some(node) = sim.live_honest().first().and_then(|id| sim.node(*id)) else { return 0.0 };
    let chain = node.chain();
    let (Some(a), Some(b)) = (chain.approved_total_at(first.0), chain.approved_total_at(last.0)) else {
        return 0.0;
    };
    let secs = (last.1 - first.1) as f64 / 1e6;
    if secs == 0.0 {
        return f64::INFINITY;
    }
    (b - a) as f64 / secs
}

fn record(cfg: &ExperimentConfig, label: &str, n: usize, latency_ms: u64, m: &Measured) -> MetricsRecord {
    MetricsRecord {
        experiment: label.to_string(),
        n,
        latency_ms,
        auth_mode: cfg.auth.label().to_string(),
        tps: m.tps,
        round_ms: m.round_ms,
        keys_per_round: m.keys,
        reconfig_ms: None,
        seed: cfg.seed,
    }
}

/// TRANSMIT + COMMIT key draws of one committed round against `2N(N-1)`.
pub fn run_key_audit(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let latency = cfg.latencies_ms[0];
    let runs: Vec<Result<(usize, Measured), HarnessError>> = cfg
        .node_counts
        .par_iter()
        .map(|&n| {
            let mut sim = sweep_config(n, latency, TagMode::ToeplitzIts, 3, cfg.seed);
            apply_script(&mut sim, &cfg.script);
            Ok((n, measure(sim, cfg.keep_logs)?))
        })
        .collect();
    let mut out = Outcome::default();
    for run in runs {
        let (n, m) = run?;
        let expected = 2 * (n * (n - 1)) as u64;
        let mut rec = record(cfg, Experiment::KeyAudit.label(), n, latency, &m);
        rec.auth_mode = TagMode::ToeplitzIts.label().to_string();
        out.records.push(rec);
        if let Some(log) = m.log {
            out.logs.push((format!("key_audit_n{n}"), log));
        }
        if m.keys != expected {
            return Err(HarnessError::AuditMismatch { n, expected, got: m.keys });
        }
        out.checks.push(Check::new(format!("keys n={n}"), true, format!("{} = 2N(N-1)", m.keys)));
    }
    Ok(out)
}

/// TPS and round duration over the `(N, L)` grid.
///
/// LATENCY_SWEEP runs with zero compute charges and checks the round
/// against `3L`; TPS_SWEEP and BASELINE_STATIC keep the charges and check
/// that throughput never rises with N or L.
pub fn run_consensus_sweep(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let label = cfg.experiment.label();
    let grid: Vec<(usize, u64)> =
        cfg.node_counts.iter().flat_map(|&n| cfg.latencies_ms.iter().map(move |&l| (n, l))).collect();
    let runs: Vec<Result<Measured, HarnessError>> = grid
        .par_iter()
        .map(|&(n, l)| {
            let mut sim = sweep_config(n, l, cfg.auth, cfg.blocks, cfg.seed);
            match cfg.experiment {
                Experiment::LatencySweep => sim.compute = ComputeCharges::zero(),
                Experiment::BaselineStatic => sim.node.rotation = false,
                _ => {}
            }
            apply_script(&mut sim, &cfg.script);
            measure(sim, cfg.keep_logs)
        })
        .collect();
    let mut out = Outcome::default();
    for ((n, l), run) in grid.iter().zip(runs) {
        let m = run?;
        if !m.report.violations.is_empty() {
            out.checks.push(Check::new(format!("safety n={n} L={l}"), false, format!("{:?}", m.report.violations)));
        }
        if let Some(log) = &m.log {
            out.logs.push((format!("{}_n{n}_l{l}", label.to_ascii_lowercase()), log.clone()));
        }
        out.records.push(record(cfg, label, *n, *l, &m));
    }
    if cfg.experiment == Experiment::LatencySweep {
        for r in out.records.iter().filter(|r| r.latency_ms > 0) {
            let ratio = r.round_ms / r.latency_ms as f64;
            out.checks.push(Check::new(
                format!("round/L n={} L={}", r.n, r.latency_ms),
                (2.8..=3.4).contains(&ratio),
                format!("{:.1} ms = {ratio:.3} L", r.round_ms),
            ));
        }
    } else {
        out.checks.extend(monotone_checks(&out.records));
    }
    // Scripted faults and membership changes alter N mid-run.
    let unscripted = cfg.script.faults.is_empty() && cfg.script.membership.is_empty();
    if cfg.auth == TagMode::ToeplitzIts && unscripted {
        for r in &out.records {
            let expected = 2 * (r.n * (r.n - 1)) as u64;
            out.checks.push(Check::new(
                format!("keys n={} L={}", r.n, r.latency_ms),
                r.keys_per_round == expected,
                format!("{} vs {expected}", r.keys_per_round),
            ));
        }
    }
    Ok(out)
}

/// TPS never increases along either axis of the grid.
pub fn monotone_checks(records: &[MetricsRecord]) -> Vec<Check> {
    let mut checks = Vec::new();
    let mut ns: Vec<usize> = records.iter().map(|r| r.n).collect();
    ns.sort();
    ns.dedup();
    let mut ls: Vec<u64> = records.iter().map(|r| r.latency_ms).collect();
    ls.sort();
    ls.dedup();
    let tps = |n: usize, l: u64| records.iter().find(|r| r.n == n && r.latency_ms == l).map(|r| r.tps);
    for &n in &ns {
        let series: Vec<f64> = ls.iter().filter_map(|&l| tps(n, l)).collect();
        let ok = series.windows(2).all(|w| w[1] <= w[0]);
        checks.push(Check::new(format!("tps non-increasing in L at n={n}"), ok, format!("{series:.1?}")));
    }
    for &l in &ls {
        let series: Vec<f64> = ns.iter().filter_map(|&n| tps(n, l)).collect();
        let ok = series.windows(2).all(|w| w[1] <= w[0]);
        checks.push(Check::new(format!("tps non-increasing in N at L={l}"), ok, format!("{series:.1?}")));
    }
    checks
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Join,
    Exit,
    Unresponsive,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Join, Scenario::Exit, Scenario::Unresponsive];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::Join => "MEMBERSHIP_JOIN",
            Scenario::Exit => "MEMBERSHIP_EXIT",
            Scenario::Unresponsive => "MEMBERSHIP_UNRESPONSIVE",
        }
    }

    fn kind(self) -> ReconfigKind {
        match self {
            Scenario::Join => ReconfigKind::Join,
            Scenario::Exit => ReconfigKind::Exit,
            Scenario::Unresponsive => ReconfigKind::Removal,
        }
    }
}

/// One membership change at 1 s into a steady trickle of requests.
pub fn membership_config(n: usize, latency_ms: u64, mode: TagMode, seed: u64, scenario: Scenario) -> SimConfig {
    let mut cfg = SimConfig {
        nodes: n,
        seed,
        latency: LatencyModel::fixed(latency_ms),
        workload: Workload { clients: 1, requests_per_client: 150, interval_ms: 100, ..Workload::default() },
        ..SimConfig::default()
    };
    cfg.node.tag_mode = mode;
    cfg.node.batch_limit = 5;
    match scenario {
        Scenario::Join => cfg
            .membership
            .push(MembershipEvent { at_ms: 1000, action: MembershipAction::Join { node: NodeId(n as u64 + 1) } }),
        Scenario::Exit => {
            cfg.membership.push(MembershipEvent { at_ms: 1000, action: MembershipAction::Exit { node: NodeId(2) } })
        }
        Scenario::Unresponsive => {
            cfg.faults.push(FaultEntry { node: NodeId(2), kind: FaultKind::Crash, from_ms: 1000, until_ms: None })
        }
    }
    cfg
}

/// Result of one membership run after letting in-flight work settle.
#[derive(Debug, Clone)]
pub struct MembershipRun {
    pub n: usize,
    pub scenario: Scenario,
    pub reconfig_ms: Option<f64>,
    pub version: Option<u64>,
    /// Live honest members hold byte-identical tables and equal tips.
    pub converged: bool,
    /// Some block committed after the change finished.
    pub resumed: bool,
    pub tps: f64,
    pub round_ms: f64,
    pub keys: u64,
    pub log: String,
}

pub fn membership_run(cfg: SimConfig, scenario: Scenario) -> Result<MembershipRun, HarnessError> {
    let n = cfg.nodes;
    let mut sim = Simulation::new(cfg)?;
    let report = sim.run()?;
    sim.drain(2_000_000);
    let rc = report.reconfigs.iter().find(|r| r.kind == scenario.kind());
    let live = sim.live_honest();
    let converged = live.first().is_some_and(|first| {
        let a = sim.node(*first).expect("live node");
        live.iter().all(|id| {
            let b = sim.node(*id).expect("live node");
            b.table().canonical_bytes() == a.table().canonical_bytes()
                && b.chain().tip_digest() == a.chain().tip_digest()
        })
    });
    let end = rc.and_then(|r| r.end_us);
    let resumed = end.is_some_and(|e| report.commit_times_us.iter().any(|(_, t)| *t > e));
    let durations = report.round_durations_us(WARMUP);
    let round_ms = durations.iter().sum::<u64>() as f64 / durations.len().max(1) as f64 / 1000.0;
    let approved = report.committed_requests() as f64;
    let tps = approved / (report.end_us as f64 / 1e6);
    Ok(MembershipRun {
        n,
        scenario,
        reconfig_ms: rc.and_then(|r| r.duration_us()).map(|d| d as f64 / 1000.0),
        version: sim.node(*live.first().unwrap_or(&NodeId(1))).map(|n| n.table().version()),
        converged,
        resumed,
        tps,
        round_ms,
        keys: sim.transmit_commit_keys(2),
        log: sim.log_ndjson(),
    })
}

pub fn run_membership_bench(cfg: &ExperimentConfig) -> Result<Outcome, HarnessError> {
    let latency = cfg.latencies_ms[0];
    let grid: Vec<(usize, Scenario)> =
        cfg.node_counts.iter().flat_map(|&n| Scenario::ALL.into_iter().map(move |s| (n, s))).collect();
    let runs: Vec<Result<MembershipRun, HarnessError>> = grid
        .par_iter()
        .map(|&(n, s)| {
            let mut sim = membership_config(n, latency, cfg.auth, cfg.seed, s);
            apply_script(&mut sim, &cfg.script);
            membership_run(sim, s)
        })
        .collect();
    let mut out = Outcome::default();
    let mut joins = Vec::new();
    for run in runs {
        let r = run?;
        let tag = format!("{} n={}", r.scenario.label(), r.n);
        out.checks.push(Check::new(format!("{tag} converged"), r.converged, format!("version {:?}", r.version)));
        out.checks.push(Check::new(
            format!("{tag} one version bump"),
            r.version == Some(1),
            format!("{:?}", r.version),
        ));
        out.checks.push(Check::new(format!("{tag} commits resume"), r.resumed, String::new()));
        match (r.scenario, r.reconfig_ms) {
            (Scenario::Unresponsive, Some(ms)) => {
                out.checks.push(Check::new(format!("{tag} waits for the timeout"), ms >= 5000.0, format!("{ms} ms")))
            }
            (Scenario::Join, Some(ms)) => joins.push((r.n, ms)),
            (_, None) => out.checks.push(Check::new(format!("{tag} finished"), false, "change never converged")),
            _ => {}
        }
        if cfg.keep_logs {
            out.logs.push((format!("{}_n{}", r.scenario.label().to_ascii_lowercase(), r.n), r.log.clone()));
        }
        out.records.push(MetricsRecord {
            experiment: r.scenario.label().to_string(),
            n: r.n,
            latency_ms: latency,
            auth_mode: cfg.auth.label().to_string(),
            tps: r.tps,
            round_ms: r.round_ms,
            keys_per_round: r.keys,
            reconfig_ms: r.reconfig_ms,
            seed: cfg.seed,
        });
    }
    joins.sort_by_key(|j| j.0);
    if joins.len() > 1 {
        let ok = joins.windows(2).all(|w| w[1].1 > w[0].1);
        out.checks.push(Check::new("join time grows with N", ok, format!("{joins:?}")));
    }
    Ok(out)
}
