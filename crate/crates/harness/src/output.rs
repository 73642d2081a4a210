//! CSV and gnuplot data emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::{AuthBenchRecord, HarnessError, MetricsRecord};

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    fs::write(path, to_csv(rows)?)?;
    Ok(())
}

/// Writes whitespace-separated series next to `out`, one file per series,
/// and returns the paths written.
pub fn write_plot_data(
    out: &Path,
    records: &[MetricsRecord],
    auth: &[AuthBenchRecord],
) -> Result<Vec<PathBuf>, HarnessError> {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("results").to_string();
    let dir = out.parent().unwrap_or(Path::new("."));
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    for r in records {
        let (key, header) = if r.experiment.starts_with("MEMBERSHIP") {
            (format!("{stem}_{}", r.experiment.to_ascii_lowercase()), "# n reconfig_ms tps\n")
        } else {
            (format!("{stem}_{}_n{}", r.experiment.to_ascii_lowercase(), r.n), "# latency_ms tps round_ms\n")
        };
        let body = files.entry(key).or_insert_with(|| header.to_string());
        if r.experiment.starts_with("MEMBERSHIP") {
            let ms = r.reconfig_ms.map_or("nan".to_string(), |m| m.to_string());
            let _ = writeln!(body, "{} {ms} {}", r.n, r.tps);
        } else {
            let _ = writeln!(body, "{} {} {}", r.latency_ms, r.tps, r.round_ms);
        }
    }
    for r in auth {
        let body = files
            .entry(format!("{stem}_auth_{}", r.auth_mode))
            .or_insert_with(|| "# n gen_us gen_sd verify_us verify_sd\n".to_string());
        let _ = writeln!(body, "{} {} {} {} {}", r.n, r.gen_us_median, r.gen_us_sd, r.verify_us_mean, r.verify_us_sd);
    }
    let mut paths = Vec::new();
    for (name, body) in files {
        let p = dir.join(format!("{name}.dat"));
        fs::write(&p, body)?;
        paths.push(p);
    }
    Ok(paths)
}
