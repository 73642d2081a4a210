//! Wall-clock tag microbenchmarks. These are the only numbers in the lab
//! that depend on the host.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use qdbft_core::auth::{digest, make_bundle, verify_bundle, TagIssuer, TagMode};
use qdbft_core::qkd::{provision, Phase, DEFAULT_UNIT_BITS};
use qdbft_core::NodeId;

use crate::{slope, Check, ExperimentConfig, Outcome};

/// Bundles per timed batch.
const BATCH: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuthBenchRecord {
    pub experiment: String,
    pub n: usize,
    pub auth_mode: String,
    pub iterations: usize,
    pub gen_us_mean: f64,
    pub gen_us_sd: f64,
    pub gen_us_median: f64,
    pub verify_us_mean: f64,
    pub verify_us_sd: f64,
    /// One tag including its key draw.
    pub single_tag_us: f64,
    /// Bundle time over `(N - 1)` single tags.
    pub bundle_ratio: f64,
    pub seed: u64,
}

struct Stats {
    mean: f64,
    sd: f64,
    median: f64,
}

fn stats(samples: &mut [f64]) -> Stats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    samples.sort_by(f64::total_cmp);
    Stats { mean, sd: var.sqrt(), median: samples[samples.len() / 2] }
}

/// Times `iterations` calls of `f`, returning per-call microseconds for
/// each batch.
fn timed(iterations: usize, mut f: impl FnMut(usize)) -> Vec<f64> {
    let mut out = Vec::new();
    let mut done = 0;
    while done < iterations {
        let k = BATCH.min(iterations - done);
        let t = Instant::now();
        for i in 0..k {
            f(done + i);
        }
        out.push(t.elapsed().as_secs_f64() * 1e6 / k as f64);
        done += k;
    }
    out
}

pub fn bench_point(n: usize, mode: TagMode, iterations: usize, seed: u64) -> AuthBenchRecord {
    let members: Vec<NodeId> = (1..=n as u64).map(NodeId).collect();
    let units = (iterations + 2 * BATCH) as u64 * 2;
    let mut pool =
        provision(&members, units, DEFAULT_UNIT_BITS, seed).expect("valid pool").with_auto_refill(Some(units));
    let mut issuer = TagIssuer::new(mode);
    let sender = members[0];
    let receiver = members[1];
    let payloads: Vec<Vec<u8>> = (0..64u64).map(|i| digest(&i.to_be_bytes()).0.to_vec()).collect();
    let bundle = |pool: &mut _, issuer: &mut TagIssuer, i: usize| {
        make_bundle(issuer, pool, sender, &payloads[i % payloads.len()], &members, Phase::Transmit).expect("keys")
    };

    // Warm caches and the key derivation path.
    for i in 0..BATCH {
        black_box(bundle(&mut pool, &mut issuer, i));
    }
    let mut gen = timed(iterations, |i| {
        black_box(bundle(&mut pool, &mut issuer, i));
    });
    let bundles: Vec<_> = (0..payloads.len()).map(|i| bundle(&mut pool, &mut issuer, i)).collect();
    let mut verify = timed(iterations, |i| {
        let j = i % bundles.len();
        black_box(verify_bundle(receiver, &payloads[j], &bundles[j], &mut pool).expect("verifiable"));
    });
    let d = digest(b"single");
    let mut single = timed(iterations, |_| {
        black_box(issuer.tag_for(&mut pool, sender, receiver, &d, Phase::Transmit).expect("keys"));
    });
    let g = stats(&mut gen);
    let v = stats(&mut verify);
    let s = stats(&mut single);
    AuthBenchRecord {
        experiment: "AUTH_BENCH".into(),
        n,
        auth_mode: mode.label().into(),
        iterations,
        gen_us_mean: g.mean,
        gen_us_sd: g.sd,
        gen_us_median: g.median,
        verify_us_mean: v.mean,
        verify_us_sd: v.sd,
        single_tag_us: s.median,
        bundle_ratio: g.median / ((n - 1) as f64 * s.median),
        seed,
    }
}

/// Both tag modes over the configured node counts; checks that bundle
/// generation time rises with N.
pub fn run_auth_bench(cfg: &ExperimentConfig) -> Outcome {
    let mut out = Outcome::default();
    for mode in [TagMode::ToeplitzIts, TagMode::Hmac] {
        let rows: Vec<AuthBenchRecord> =
            cfg.node_counts.iter().map(|&n| bench_point(n, mode, cfg.iterations, cfg.seed)).collect();
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.gen_us_median)).collect();
        if pts.len() > 1 {
            let s = slope(&pts);
            out.checks.push(Check::new(format!("{mode} generation slope"), s > 0.0, format!("{s:.4} us per node")));
        }
        out.auth.extend(rows);
    }
    out
}
