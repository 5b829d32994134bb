//! File emission: samples CSV, traces, metric reports, sidecars.
//!
//! CSV is the contract; floats print in shortest round-trip form so
//! files parse back without loss and reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Samples CSV: header `index,x0,...,x{d-1}`, one row per sample.
pub fn samples_to_csv(samples: &[Vec<f64>], dim: usize) -> String {
    let mut out = String::from("index");
    for j in 0..dim {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in s {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_samples_csv(path: &Path, samples: &[Vec<f64>], dim: usize) -> Result<()> {
    write_text(path, &samples_to_csv(samples, dim))
}

/// Parse a samples CSV produced by [`write_samples_csv`].
pub fn read_samples_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading samples {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty samples CSV")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"index") || cols.len() < 2 {
        bail!("samples CSV must start with an `index,x0,...` header, got `{header}`");
    }
    let d = cols.len() - 1;
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            bail!("samples CSV row {} has {} fields, expected {}", lineno + 2, fields.len(), d + 1);
        }
        let row: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("samples CSV row {}", lineno + 2))?;
        samples.push(row);
    }
    Ok(samples)
}

/// Loss-trace CSV: `step,loss`.
pub fn trace_to_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(out, "{i},{v}");
    }
    out
}

/// A 1-D or 2-D grid as CSV (`x0[,x1],value`).
pub fn grid_to_csv(centers: &[Vec<f64>], values: &[f64], value_name: &str) -> String {
    let dim = centers.first().map_or(1, |c| c.len());
    let mut out = String::new();
    for j in 0..dim {
        let _ = write!(out, "x{j},");
    }
    let _ = writeln!(out, "{value_name}");
    for (c, v) in centers.iter().zip(values) {
        for x in c {
            let _ = write!(out, "{x},");
        }
        let _ = writeln!(out, "{v}");
    }
    out
}

/// One entry of the metrics report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_values: Option<Vec<f64>>,
    pub params: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
}

/// The metrics report schema emitted by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub config_hash: String,
    pub inputs: ReportInputs,
    pub metrics: Vec<MetricEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportInputs {
    pub samples: String,
    pub reference: String,
    pub n_samples: usize,
    pub n_reference: usize,
    pub dim: usize,
}

/// Wall-clock sidecar, kept out of the deterministic artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

pub fn out_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
