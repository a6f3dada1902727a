//! Per-step training log: one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ajepa_core::jepa::StepMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::fsutil;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub grad_norm: f64,
    /// Mean over dimensions of the per-dimension target variance.
    pub target_variance: f64,
    pub target_variance_min: f64,
    pub mask_ratio: f64,
}

impl From<&StepMetrics> for MetricRecord {
    fn from(m: &StepMetrics) -> Self {
        MetricRecord {
            step: m.step,
            loss: m.loss,
            lr: m.lr,
            tau: m.tau,
            grad_norm: m.grad_norm,
            target_variance: m.target_var_mean,
            target_variance_min: m.target_var_min,
            mask_ratio: m.mask_ratio,
        }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Append-only writer. Each record is flushed as soon as it is written.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
}

impl MetricsLog {
    /// Start a fresh log, discarding any previous contents.
    pub fn create(path: &Path) -> Result<Self> {
        fsutil::write_atomic(path, b"")?;
        Self::append_to(path)
    }

    /// Continue a log for a run resumed at `step`: records of updates at or
    /// after `step` (written after the checkpoint) are dropped first.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let kept = if path.exists() { read_log(path)? } else { Vec::new() };
        let mut text = String::new();
        for r in kept.iter().filter(|r| r.step < step) {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        fsutil::write_atomic(path, text.as_bytes())?;
        Self::append_to(path)
    }

    fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}
