use std::fs;
use std::path::{Path, PathBuf};

use super::{Bench, Evaluation};
use crate::checkpoint;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::{write_metrics, write_scores, LocalizationReport, MetricReport};
use crate::params::ParamSet;
use crate::synth::{build_dataset, load_samples};
use crate::train::{write_timings, RunRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Also train and evaluate the direct-regression baseline.
    pub regression: bool,
}

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub dir: PathBuf,
    pub evaluation: Evaluation,
    pub regression: Option<LocalizationReport>,
    pub records: Vec<RunRecord>,
    pub metrics: Vec<MetricReport>,
}

impl PipelineOutcome {
    pub fn metric(&self, name: &str, split: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name && m.split == split).map(|m| m.value)
    }
}

fn save_stage(dir: &Path, name: &str, params: &ParamSet<f32>, mut record: RunRecord) -> Result<RunRecord> {
    let ckpt = dir.join(format!("{name}.ckpt"));
    checkpoint::save(&ckpt, params)?;
    record.write_csv(&dir.join(format!("train_{name}.csv")))?;
    record.checkpoint = Some(ckpt);
    Ok(record)
}

/// Synthesize data, train every stage and evaluate on the test split, writing
/// datasets, checkpoints, loss curves, scores and metrics under `out`.
pub fn run_pipeline(cfg: &Config, seed: u64, out: &Path, opts: PipelineOptions) -> Result<PipelineOutcome> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.toml"), cfg.canonical()).map_err(|e| Error::io(out, e))?;
    let files = build_dataset(&cfg.data, seed, &out.join("data"))?;
    let bench = Bench::from_samples(seed, &load_samples(&files.train_manifest)?, &load_samples(&files.test_manifest)?)?;

    let mut records = Vec::new();
    let (detector, rec) = bench.stage0(cfg)?;
    records.push(save_stage(out, "detector", &detector, rec)?);
    let (generator, rec) = bench.stage1(cfg, detector.clone())?;
    records.push(save_stage(out, "diffusion", &generator, rec)?);
    let (full, rec) = bench.stage2(cfg, generator)?;
    records.push(save_stage(out, "fusion", &full, rec)?);

    let evaluation = bench.evaluate(cfg, &full, seed)?;
    write_scores(&out.join("scores_detector.csv"), &evaluation.detector)?;
    write_scores(&out.join("scores_fused.csv"), &evaluation.fused)?;
    evaluation.localization.write_csv(&out.join("localization.csv"))?;
    let mut metrics = evaluation.metrics()?;

    let regression = if opts.regression {
        let (reg, rec) = bench.regression(cfg, detector)?;
        records.push(save_stage(out, "regression", &reg, rec)?);
        let report = bench.evaluate_regression(cfg, &reg)?;
        report.write_csv(&out.join("localization_regression.csv"))?;
        metrics.extend(report.metrics());
        Some(report)
    } else {
        None
    };

    write_metrics(&out.join("metrics.csv"), &metrics)?;
    write_timings(&out.join("timing.csv"), &records)?;
    Ok(PipelineOutcome { dir: out.to_path_buf(), evaluation, regression, records, metrics })
}
