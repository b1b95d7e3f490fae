//! Run directories: `metrics.csv`, `metrics.jsonl`, `summary.json`,
//! `summary.txt` and `resolved_config.toml`.
//!
//! Floats in CSV use `{:.16e}`, which round-trips every f64 exactly.
//! Vector-valued columns are `;`-joined.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use nap_core::benchmarks::TwinRow;
use nap_core::gradcheck::OpReport;
use nap_core::metrics::MetricRow;

pub const OUTPUT_ROOT_ENV: &str = "NAP_OUTPUT_ROOT";

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(";")
}

/// A row type with a fixed CSV header.
pub trait CsvRecord: Serialize {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

impl CsvRecord for MetricRow {
    const HEADER: &'static [&'static str] = &[
        "step",
        "task",
        "online_accuracy",
        "loss",
        "param_norm",
        "grad_norm",
        "effective_lr",
        "lr",
        "feature_rank",
        "dead_fraction",
        "linearized_fraction",
        "layer_param_norms",
        "layer_dead_fractions",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.task.to_string(),
            fmt_f64(self.online_accuracy),
            fmt_f64(self.loss),
            fmt_f64(self.param_norm),
            fmt_f64(self.grad_norm),
            fmt_f64(self.effective_lr),
            fmt_f64(self.lr),
            self.feature_rank.to_string(),
            fmt_f64(self.dead_fraction),
            fmt_f64(self.linearized_fraction),
            fmt_vec(&self.layer_param_norms),
            fmt_vec(&self.layer_dead_fractions),
        ]
    }
}

impl CsvRecord for TwinRow {
    const HEADER: &'static [&'static str] = &["step", "discrepancy", "loss_free", "loss_projected", "batch_hash"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            fmt_f64(self.discrepancy),
            fmt_f64(self.loss_free),
            fmt_f64(self.loss_projected),
            format!("{:016x}", self.batch_hash),
        ]
    }
}

/// Dead count of the random walk averaged over trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WalkRow {
    pub step: u64,
    pub mean_dead: f64,
    pub dead_fraction: f64,
}

impl CsvRecord for WalkRow {
    const HEADER: &'static [&'static str] = &["step", "mean_dead", "dead_fraction"];

    fn fields(&self) -> Vec<String> {
        vec![self.step.to_string(), fmt_f64(self.mean_dead), fmt_f64(self.dead_fraction)]
    }
}

impl CsvRecord for OpReport {
    const HEADER: &'static [&'static str] = &["op", "instances", "max_rel_error", "passed"];

    fn fields(&self) -> Vec<String> {
        vec![
            self.op.clone(),
            self.instances.to_string(),
            fmt_f64(self.max_rel_error),
            self.passed.to_string(),
        ]
    }
}

/// Streams rows to CSV and JSONL, flushing after every row so that a run
/// that dies midway leaves everything written so far on disk.
pub struct RowWriter {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    rows: usize,
}

impl RowWriter {
    pub fn create<T: CsvRecord>(dir: &Path) -> Result<Self> {
        let csv_path = dir.join("metrics.csv");
        let mut csv = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
        csv.write_record(T::HEADER)?;
        csv.flush()?;
        let jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        Ok(Self { csv, jsonl, rows: 0 })
    }

    pub fn write<T: CsvRecord>(&mut self, row: &T) -> Result<()> {
        self.csv.write_record(row.fields())?;
        self.csv.flush()?;
        serde_json::to_writer(&mut self.jsonl, row)?;
        self.jsonl.write_all(b"\n")?;
        self.jsonl.flush()?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Applies the output-root override to relative directories.
pub fn resolve_output_dir(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

pub fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

pub fn write_summary(dir: &Path, summary: &serde_json::Value, text: &str) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    fs::write(dir.join("summary.txt"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_through_csv_format() {
        for v in [0.1, 1.0 / 3.0, 6.25e-5, f64::MIN_POSITIVE, 123456.789, -2.5e-300] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
    }

    #[test]
    fn metric_row_fields_match_header() {
        let row = MetricRow {
            step: 10,
            task: 0,
            online_accuracy: 0.5,
            loss: 2.0,
            param_norm: 3.0,
            grad_norm: 0.1,
            layer_param_norms: vec![1.0, 2.0],
            feature_rank: 7,
            dead_fraction: 0.0,
            linearized_fraction: 0.25,
            layer_dead_fractions: vec![0.0, 0.5],
            effective_lr: 1e-4,
            lr: 1e-3,
        };
        let f = row.fields();
        assert_eq!(f.len(), MetricRow::HEADER.len());
        assert_eq!(f[11], "1.0000000000000000e0;2.0000000000000000e0");
    }
}
