//! CSV and JSON writers. Every CSV has a header row and a `config_hash`
//! column.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use confkv_core::analysis::TraceSummary;
use serde::Serialize;

/// Summary columns shared by decode, compare and sweep.
pub const SUMMARY_COLUMNS: [&str; 14] = [
    "steps",
    "mean_len",
    "max_len",
    "eviction_rate",
    "total_evicted",
    "peak_bytes",
    "mean_bytes",
    "final_bytes",
    "quantized_fraction",
    "mean_confidence",
    "high_fraction",
    "needle_retention",
    "needle_checks",
    "confidence_histogram",
];

/// Values for [`SUMMARY_COLUMNS`]; `checks` is how many needle checks fed
/// the retention figure.
pub fn summary_values(s: &TraceSummary, checks: usize) -> Vec<String> {
    vec![
        s.steps.to_string(),
        s.mean_len.to_string(),
        s.max_len.to_string(),
        s.eviction_rate.to_string(),
        s.total_evicted.to_string(),
        s.peak_bytes.to_string(),
        s.mean_bytes.to_string(),
        s.final_bytes.to_string(),
        s.quantized_fraction.to_string(),
        s.mean_confidence.to_string(),
        s.high_fraction.to_string(),
        s.needle_retention.map(|r| r.to_string()).unwrap_or_default(),
        checks.to_string(),
        s.confidence_histogram
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    ]
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
