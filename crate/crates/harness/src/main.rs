use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use qdbft_core::auth::TagMode;
use qdbft_harness::{
    parse_auth, run_experiment, write_csv, write_plot_data, Experiment, ExperimentConfig, FaultScript,
};

/// Reproduces the QDBFT evaluation in simulation.
#[derive(Debug, Parser)]
#[command(name = "qdbft", version)]
struct Cli {
    /// KEY_AUDIT, AUTH_BENCH, TPS_SWEEP, LATENCY_SWEEP, MEMBERSHIP or BASELINE_STATIC.
    experiment: Experiment,
    /// Comma-separated node counts.
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<usize>>,
    /// Comma-separated one-way link latencies in milliseconds.
    #[arg(long = "latency-ms", value_delimiter = ',')]
    latency_ms: Option<Vec<u64>>,
    /// toeplitz or hmac.
    #[arg(long, value_parser = parse_auth)]
    auth: Option<TagMode>,
    #[arg(long, default_value_t = 100)]
    blocks: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Bundles timed per point (AUTH_BENCH).
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    /// JSON fault script applied to every run.
    #[arg(long)]
    faults: Option<PathBuf>,
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Also write gnuplot data files beside the CSV.
    #[arg(long)]
    emit_plots: bool,
    /// Directory for per-run NDJSON event logs.
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<bool, qdbft_harness::HarnessError> {
    let mut cfg = ExperimentConfig::new(cli.experiment);
    if let Some(n) = cli.nodes {
        cfg.node_counts = n;
    }
    if let Some(l) = cli.latency_ms {
        cfg.latencies_ms = l;
    }
    if let Some(a) = cli.auth {
        cfg.auth = a;
    }
    cfg.blocks = cli.blocks;
    cfg.seed = cli.seed;
    cfg.iterations = cli.iterations;
    cfg.keep_logs = cli.log_dir.is_some();
    if let Some(p) = &cli.faults {
        cfg.script = FaultScript::from_json(&std::fs::read_to_string(p)?)?;
    }

    let outcome = run_experiment(&cfg)?;
    if cli.experiment == Experiment::AuthBench {
        write_csv(&cli.out, &outcome.auth)?;
    } else {
        write_csv(&cli.out, &outcome.records)?;
    }
    if cli.emit_plots {
        for p in write_plot_data(&cli.out, &outcome.records, &outcome.auth)? {
            println!("wrote {}", p.display());
        }
    }
    if let Some(dir) = &cli.log_dir {
        std::fs::create_dir_all(dir)?;
        for (name, log) in &outcome.logs {
            std::fs::write(dir.join(format!("{name}.ndjson")), log)?;
        }
    }
    for c in &outcome.checks {
        println!("{} {}: {}", if c.pass { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    println!("wrote {}", cli.out.display());
    Ok(outcome.passed())
}
