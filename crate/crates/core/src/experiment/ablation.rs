use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use super::{Bench, Evaluation};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::{fmt_value, LocalizationReport, MetricReport};
use crate::nets::{FusionMode, Placement};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    /// Gating against addition, Hadamard product and concatenation.
    Fusion,
    /// Number of denoising steps `T`.
    Steps,
    /// Sampling seed at inference.
    Seed,
    /// Single-stage joint training against the two-stage protocol.
    Strategy,
    /// Where detector features enter the U-Net.
    Conditioning,
    /// Fusion trained on sampled maps against fusion trained on GT maps.
    GtFusion,
    /// Diffusion-generated maps against one-pass regression.
    RegressionVsDiffusion,
}

pub const ABLATION_KINDS: [AblationKind; 7] = [
    AblationKind::Fusion,
    AblationKind::Steps,
    AblationKind::Seed,
    AblationKind::Strategy,
    AblationKind::Conditioning,
    AblationKind::GtFusion,
    AblationKind::RegressionVsDiffusion,
];

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Fusion => "fusion",
            AblationKind::Steps => "steps",
            AblationKind::Seed => "seed",
            AblationKind::Strategy => "strategy",
            AblationKind::Conditioning => "conditioning",
            AblationKind::GtFusion => "gt-fusion",
            AblationKind::RegressionVsDiffusion => "regression-vs-diffusion",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ABLATION_KINDS
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown ablation `{s}`")))
    }
}

/// One grid cell of an ablation and its metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub config_hash: String,
    pub values: Vec<(String, f64)>,
}

impl AblationRow {
    pub fn value(&self, metric: &str) -> Option<f64> {
        self.values.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }

    pub fn reports(&self, kind: AblationKind) -> Vec<MetricReport> {
        let split = format!("ablation/{kind}/{}", self.cell);
        self.values.iter().map(|(m, v)| MetricReport::new(m.as_str(), split.as_str(), &self.config_hash, *v)).collect()
    }
}

fn map_values(report: &LocalizationReport) -> Vec<(String, f64)> {
    report.metrics().into_iter().filter(|m| m.metric != "samples").map(|m| (m.metric, m.value)).collect()
}

fn eval_values(e: &Evaluation) -> Result<Vec<(String, f64)>> {
    let mut v = vec![("auc_detector".to_string(), e.auc_detector()?), ("auc_fused".to_string(), e.auc_fused()?)];
    v.extend(map_values(&e.localization));
    Ok(v)
}

fn row(cell: impl Into<String>, cfg: &Config, values: Vec<(String, f64)>) -> AblationRow {
    AblationRow { cell: cell.into(), config_hash: cfg.hash().to_string(), values }
}

/// Train the detector and the diffusion generator of `cfg`.
fn generator(bench: &Bench, cfg: &Config, detector: &ParamSet<f32>) -> Result<ParamSet<f32>> {
    Ok(bench.stage1(cfg, detector.clone())?.0)
}

/// Run every cell of `kind` on one synthesized dataset with a shared seed.
/// Cells run in parallel and are returned in grid order. With `out`, the
/// comparison table goes to `ablation_<kind>.csv` and the long-form metrics
/// to `ablation_<kind>_metrics.csv`.
pub fn run_ablation(kind: AblationKind, cfg: &Config, seed: u64, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let bench = Bench::generate(cfg, seed)?;
    let (detector, _) = bench.stage0(cfg)?;
    let rows = match kind {
        AblationKind::Fusion => {
            let generator = generator(&bench, cfg, &detector)?;
            FusionMode::ALL
                .par_iter()
                .map(|mode| {
                    let c = cfg.with("fusion.mode", mode.name())?;
                    let (full, _) = bench.stage2(&c, generator.clone())?;
                    Ok(row(mode.name(), &c, eval_values(&bench.evaluate(&c, &full, seed)?)?))
                })
                .collect::<Result<Vec<_>>>()?
        }
        AblationKind::Steps => cfg
            .eval
            .steps_grid
            .par_iter()
            .map(|t| {
                let c = cfg.with("diffusion.T", &t.to_string())?;
                let (full, _) = bench.stage2(&c, generator(&bench, &c, &detector)?)?;
                Ok(row(format!("T={t}"), &c, eval_values(&bench.evaluate(&c, &full, seed)?)?))
            })
            .collect::<Result<Vec<_>>>()?,
        AblationKind::Seed => {
            let (full, _) = bench.stage2(cfg, generator(&bench, cfg, &detector)?)?;
            let mut rows = (1..=cfg.eval.seed_count as u64)
                .into_par_iter()
                .map(|s| Ok(row(format!("seed={s}"), cfg, eval_values(&bench.evaluate(cfg, &full, s)?)?)))
                .collect::<Result<Vec<_>>>()?;
            rows.extend(summary_rows(&rows, cfg));
            rows
        }
        AblationKind::Strategy => {
            let cells = ["two-stage", "single-stage"];
            cells
                .par_iter()
                .map(|&cell| {
                    let full = if cell == "two-stage" {
                        bench.stage2(cfg, generator(&bench, cfg, &detector)?)?.0
                    } else {
                        bench.single_stage(cfg, detector.clone())?.0
                    };
                    Ok(row(cell, cfg, eval_values(&bench.evaluate(cfg, &full, seed)?)?))
                })
                .collect::<Result<Vec<_>>>()?
        }
        AblationKind::Conditioning => Placement::ALL
            .par_iter()
            .map(|p| {
                let c = cfg.with("unet.placement", p.name())?;
                let (full, _) = bench.stage2(&c, generator(&bench, &c, &detector)?)?;
                Ok(row(p.name(), &c, eval_values(&bench.evaluate(&c, &full, seed)?)?))
            })
            .collect::<Result<Vec<_>>>()?,
        AblationKind::GtFusion => {
            let generator = generator(&bench, cfg, &detector)?;
            ["sampled", "gt"]
                .par_iter()
                .map(|&source| {
                    let c = cfg.with("train.stage2.map_source", source)?;
                    let (full, _) = bench.stage2(&c, generator.clone())?;
                    Ok(row(source, &c, eval_values(&bench.evaluate(&c, &full, seed)?)?))
                })
                .collect::<Result<Vec<_>>>()?
        }
        AblationKind::RegressionVsDiffusion => ["diffusion", "regression"]
            .par_iter()
            .map(|&cell| {
                let report = if cell == "diffusion" {
                    bench.localize(cfg, &generator(&bench, cfg, &detector)?, seed)?
                } else {
                    bench.evaluate_regression(cfg, &bench.regression(cfg, detector.clone())?.0)?
                };
                Ok(row(cell, cfg, map_values(&report)))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_ablation_csv(&dir.join(format!("ablation_{kind}.csv")), kind, &rows)?;
        let reports: Vec<MetricReport> = rows.iter().flat_map(|r| r.reports(kind)).collect();
        crate::metrics::write_metrics(&dir.join(format!("ablation_{kind}_metrics.csv")), &reports)?;
    }
    Ok(rows)
}

/// `mean` and `std` rows over per-seed rows.
fn summary_rows(rows: &[AblationRow], cfg: &Config) -> Vec<AblationRow> {
    let Some(first) = rows.first() else { return vec![] };
    let n = rows.len() as f64;
    let stat = |metric: &str| {
        let xs: Vec<f64> = rows.iter().filter_map(|r| r.value(metric)).collect();
        let m = xs.iter().sum::<f64>() / n;
        (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
    };
    let names: Vec<String> = first.values.iter().map(|(m, _)| m.clone()).collect();
    let mean = names.iter().map(|m| (m.clone(), stat(m).0)).collect();
    let std = names.iter().map(|m| (m.clone(), stat(m).1)).collect();
    vec![row("mean", cfg, mean), row("std", cfg, std)]
}

/// Comparison table: one row per grid cell, one column per metric.
pub fn write_ablation_csv(path: &Path, kind: AblationKind, rows: &[AblationRow]) -> Result<()> {
    let metrics: Vec<&str> = rows.first().map(|r| r.values.iter().map(|(m, _)| m.as_str()).collect()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["ablation", "cell", "config_hash"];
    header.extend(&metrics);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![kind.name().to_string(), r.cell.clone(), r.config_hash.clone()];
        rec.extend(metrics.iter().map(|m| r.value(m).map(fmt_value).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
