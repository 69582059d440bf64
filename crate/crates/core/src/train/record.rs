//! Per-run loss curves and timing.

use std::path::{Path, PathBuf};

use super::StageId;
use crate::error::{Error, Result};

pub const RECORD_HEADER: [&str; 5] = ["stage", "epoch", "metric", "value", "config_hash"];
pub const TIMING_HEADER: [&str; 4] = ["stage", "wall_clock_s", "checkpoint", "config_hash"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub stage: StageId,
    /// Named per-epoch curves; the first one is the optimized loss.
    pub curves: Vec<(String, Vec<f64>)>,
    pub checkpoint: Option<PathBuf>,
    pub config_hash: String,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// Per-epoch values of the optimized loss.
    pub fn losses(&self) -> &[f64] {
        &self.curves[0].1
    }

    pub fn curve(&self, name: &str) -> Option<&[f64]> {
        self.curves.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Loss curves only; wall-clock time goes to a separate file so that the
    /// record is reproducible byte for byte.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(RECORD_HEADER)?;
        for (name, values) in &self.curves {
            for (e, v) in values.iter().enumerate() {
                w.write_record([self.stage.name(), &(e + 1).to_string(), name, &format!("{v}"), &self.config_hash])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_timing(&self, path: &Path) -> Result<()> {
        write_timings(path, std::slice::from_ref(self))
    }
}

/// Wall-clock time of several runs, one row each.
pub fn write_timings(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TIMING_HEADER)?;
    for r in records {
        let ckpt = r.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        w.write_record([r.stage.name(), &format!("{:.3}", r.wall_clock_secs), &ckpt, &r.config_hash])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
