//! Experiments for the QDBFT lab: key audit, tag microbenchmarks,
//! throughput and latency sweeps, reconfiguration timing and the seeded
//! safety suite.

pub mod bench;
pub mod experiments;
pub mod output;
pub mod safety;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use qdbft_core::auth::TagMode;
use qdbft_simnet::{FaultEntry, MembershipEvent, SimError};

pub use bench::{run_auth_bench, AuthBenchRecord};
pub use experiments::{
    run_consensus_sweep, run_experiment, run_key_audit, run_membership_bench, sweep_config, Outcome,
};
pub use output::{to_csv, write_csv, write_plot_data};
pub use safety::{random_script, run_safety_suite, SafetyRun};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("key audit mismatch at n={n}: expected {expected}, got {got}")]
    AuditMismatch { n: usize, expected: u64, got: u64 },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad fault script: {0}")]
    Script(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Experiment {
    KeyAudit,
    AuthBench,
    TpsSweep,
    LatencySweep,
    Membership,
    BaselineStatic,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::KeyAudit,
        Experiment::AuthBench,
        Experiment::TpsSweep,
        Experiment::LatencySweep,
        Experiment::Membership,
        Experiment::BaselineStatic,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Experiment::KeyAudit => "KEY_AUDIT",
            Experiment::AuthBench => "AUTH_BENCH",
            Experiment::TpsSweep => "TPS_SWEEP",
            Experiment::LatencySweep => "LATENCY_SWEEP",
            Experiment::Membership => "MEMBERSHIP",
            Experiment::BaselineStatic => "BASELINE_STATIC",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Experiment::ALL.into_iter().find(|e| e.label() == norm).ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

pub fn parse_auth(s: &str) -> Result<TagMode, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "toeplitz" | "toeplitz_its" => Ok(TagMode::ToeplitzIts),
        "hmac" => Ok(TagMode::Hmac),
        other => Err(format!("unknown auth mode {other:?}")),
    }
}

/// Faults and membership changes layered onto every run of an experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultScript {
    pub faults: Vec<FaultEntry>,
    pub membership: Vec<MembershipEvent>,
}

impl FaultScript {
    pub fn from_json(s: &str) -> Result<FaultScript, HarnessError> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub node_counts: Vec<usize>,
    pub latencies_ms: Vec<u64>,
    pub auth: TagMode,
    pub blocks: u64,
    pub seed: u64,
    /// Bundles timed per point in the auth benchmark.
    pub iterations: usize,
    pub script: FaultScript,
    /// Keep each run's NDJSON event log in the outcome.
    pub keep_logs: bool,
}

impl ExperimentConfig {
    /// Defaults for each experiment's axes.
    pub fn new(experiment: Experiment) -> Self {
        let (node_counts, latencies_ms) = match experiment {
            Experiment::KeyAudit | Experiment::AuthBench => ((4..=10).collect(), vec![0]),
            Experiment::Membership => (vec![4, 7, 10], vec![10]),
            _ => (vec![4, 7, 10], vec![0, 10, 25, 50, 100]),
        };
        let auth = if experiment == Experiment::BaselineStatic { TagMode::Hmac } else { TagMode::ToeplitzIts };
        ExperimentConfig {
            experiment,
            node_counts,
            latencies_ms,
            auth,
            blocks: 100,
            seed: 42,
            iterations: 1000,
            script: FaultScript::default(),
            keep_logs: false,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.node_counts.is_empty() || self.node_counts.iter().any(|n| !(2..=64).contains(n)) {
            return Err(HarnessError::Invalid("node counts must lie in 2..=64".into()));
        }
        if self.latencies_ms.is_empty() {
            return Err(HarnessError::Invalid("at least one latency is required".into()));
        }
        if self.blocks < 3 {
            return Err(HarnessError::Invalid("need at least 3 blocks".into()));
        }
        Ok(())
    }
}

/// One row of experiment output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub n: usize,
    pub latency_ms: u64,
    pub auth_mode: String,
    pub tps: f64,
    pub round_ms: f64,
    pub keys_per_round: u64,
    pub reconfig_ms: Option<f64>,
    pub seed: u64,
}

/// A named pass/fail assertion made by an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), pass, detail: detail.into() }
    }
}

/// Least-squares slope of `y` against `x`.
pub fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_parse() {
        for e in Experiment::ALL {
            assert_eq!(e.label().parse::<Experiment>().unwrap(), e);
        }
        assert_eq!("tps-sweep".parse::<Experiment>().unwrap(), Experiment::TpsSweep);
        assert!("nope".parse::<Experiment>().is_err());
    }

    #[test]
    fn slope_of_a_line() {
        let pts: Vec<(f64, f64)> = (0..5).map(|x| (x as f64, 3.0 * x as f64 + 1.0)).collect();
        assert!((slope(&pts) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn script_parses() {
        let s = r#"{"faults":[{"node":2,"kind":"crash","from_ms":100}],
                    "membership":[{"at_ms":50,"action":"join","node":9}]}"#;
        let script = FaultScript::from_json(s).unwrap();
        assert_eq!(script.faults.len(), 1);
        assert_eq!(script.membership.len(), 1);
    }
}
