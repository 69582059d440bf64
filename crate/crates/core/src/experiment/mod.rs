//! End-to-end runs: synthesis, staged training, evaluation and ablation grids.

mod ablation;
mod pipeline;

pub use ablation::{run_ablation, write_ablation_csv, AblationKind, AblationRow, ABLATION_KINDS};
pub use pipeline::{run_pipeline, PipelineOptions, PipelineOutcome};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::{auc, localization_report, LocalizationReport, MetricReport, ScoredSample};
use crate::nets::Model;
use crate::params::ParamSet;
use crate::synth::{generate_samples, Label, ManipulationKind, Sample};
use crate::tensor::Tensor;
use crate::train::{
    detector_features, detector_scores, fusion_scores, generate_maps, map_seed, regression_maps, train_detector,
    train_diffusion, train_fusion, train_regression, train_single_stage, RunRecord, StageId, TrainData,
};

/// Datasets of one run, held in memory.
#[derive(Clone, Debug)]
pub struct Bench {
    pub seed: u64,
    pub train: TrainData<f32>,
    pub test: TrainData<f32>,
    pub test_kinds: Vec<Option<ManipulationKind>>,
}

/// Parameters plus the record of the stage that produced them.
pub type Trained = (ParamSet<f32>, RunRecord);

impl Bench {
    pub fn from_samples(seed: u64, train: &[Sample], test: &[Sample]) -> Result<Self> {
        Ok(Self {
            seed,
            train: TrainData::new(train)?,
            test: TrainData::new(test)?,
            test_kinds: test.iter().map(|s| s.kind).collect(),
        })
    }

    /// Synthesize the datasets of `cfg` in memory.
    pub fn generate(cfg: &Config, seed: u64) -> Result<Self> {
        let (train, test) = generate_samples(&cfg.data, seed)?;
        Self::from_samples(seed, &train, &test)
    }

    pub fn stage0(&self, cfg: &Config) -> Result<Trained> {
        train_stage(cfg, StageId::Detector, &self.train, None, self.seed)
    }

    pub fn stage1(&self, cfg: &Config, params: ParamSet<f32>) -> Result<Trained> {
        train_stage(cfg, StageId::Diffusion, &self.train, Some(params), self.seed)
    }

    pub fn stage2(&self, cfg: &Config, params: ParamSet<f32>) -> Result<Trained> {
        train_stage(cfg, StageId::Fusion, &self.train, Some(params), self.seed)
    }

    pub fn regression(&self, cfg: &Config, params: ParamSet<f32>) -> Result<Trained> {
        train_stage(cfg, StageId::Regression, &self.train, Some(params), self.seed)
    }

    pub fn single_stage(&self, cfg: &Config, params: ParamSet<f32>) -> Result<Trained> {
        train_stage(cfg, StageId::SingleStage, &self.train, Some(params), self.seed)
    }

    /// Detector-alone and fused scores on the test split, with maps drawn
    /// under `sampling_seed`.
    pub fn evaluate(&self, cfg: &Config, params: &ParamSet<f32>, sampling_seed: u64) -> Result<Evaluation> {
        let model = Model::new(cfg.model.clone())?;
        let (pyramids, maps) = self.sample_maps(cfg, &model, params, sampling_seed)?;
        self.score(cfg, &model, params, &pyramids, maps)
    }

    /// Map quality of the diffusion generator alone on the test split.
    pub fn localize(&self, cfg: &Config, params: &ParamSet<f32>, sampling_seed: u64) -> Result<LocalizationReport> {
        let model = Model::new(cfg.model.clone())?;
        let (_, maps) = self.sample_maps(cfg, &model, params, sampling_seed)?;
        self.localization(&flatten(maps)?, "test/diffusion", cfg.hash())
    }

    /// Test-split detector pyramids and `1×1×H×W` generated maps.
    fn sample_maps(&self, cfg: &Config, model: &Model, params: &ParamSet<f32>, sampling_seed: u64) -> Result<(Vec<Vec<Tensor<f32>>>, Vec<Tensor<f32>>)> {
        let pyramids = detector_features(model, params, &self.test.images, cfg.eval.batch_size)?;
        let seeds: Vec<u64> = self.test.ids.iter().map(|&id| map_seed(sampling_seed, id, 0)).collect();
        let maps = generate_maps(model, params, &pyramids, &seeds, &cfg.schedule()?, cfg.diffusion.sampler, cfg.diffusion.sample_batch)?;
        Ok((pyramids, maps))
    }

    /// Map quality of the direct-regression model on the test split.
    pub fn evaluate_regression(&self, cfg: &Config, params: &ParamSet<f32>) -> Result<LocalizationReport> {
        let model = Model::new(cfg.model.clone())?;
        let pyramids = detector_features(&model, params, &self.test.images, cfg.eval.batch_size)?;
        let maps = regression_maps(&model, params, &pyramids, &cfg.schedule()?, cfg.eval.batch_size)?;
        self.localization(&flatten(maps)?, "test/regression", cfg.hash())
    }

    fn score(
        &self,
        cfg: &Config,
        model: &Model,
        params: &ParamSet<f32>,
        pyramids: &[Vec<Tensor<f32>>],
        maps: Vec<Tensor<f32>>,
    ) -> Result<Evaluation> {
        let batch = cfg.eval.batch_size;
        let det = detector_scores(model, params, &self.test.images, batch)?;
        let fused = fusion_scores(model, params, &maps, pyramids, batch)?;
        let maps = flatten(maps)?;
        let localization = self.localization(&maps, "test/diffusion", cfg.hash())?;
        Ok(Evaluation {
            detector: self.scored(&det),
            fused: self.scored(&fused),
            test_kinds: self.test_kinds.clone(),
            maps,
            localization,
            group_average: cfg.eval.group_average,
            config_hash: cfg.hash().to_string(),
        })
    }

    fn localization(&self, maps: &[Tensor<f32>], split: &str, hash: &str) -> Result<LocalizationReport> {
        let gt = flatten(self.test.maps.clone())?;
        localization_report(&self.test.ids, maps, &gt, split, hash)
    }

    fn scored(&self, scores: &[f64]) -> Vec<ScoredSample> {
        (0..self.test.len())
            .map(|i| ScoredSample {
                id: self.test.ids[i],
                group_id: self.test.group_ids[i],
                label: self.test.labels[i],
                score: scores[i],
            })
            .collect()
    }
}

/// `1×1×H×W` maps to `H×W`.
fn flatten(maps: Vec<Tensor<f32>>) -> Result<Vec<Tensor<f32>>> {
    maps.into_iter()
        .map(|m| {
            let (h, w) = (m.shape()[2], m.shape()[3]);
            m.reshape(&[h, w])
        })
        .collect()
}

/// Run one training stage of `cfg` on `data`. Every stage but the detector
/// starts from `init`; modules the stage trains from scratch are freshly
/// initialized from `seed`.
pub fn train_stage(cfg: &Config, stage: StageId, data: &TrainData<f32>, init: Option<ParamSet<f32>>, seed: u64) -> Result<Trained> {
    let model = Model::new(cfg.model.clone())?;
    let sc = cfg.stage(stage, seed);
    let hash = cfg.hash();
    let init = match (stage, init) {
        (StageId::Detector, init) => init.unwrap_or_else(|| model.init_params(seed)),
        (_, Some(p)) => p,
        (_, None) => return Err(Error::InvalidParam(format!("stage `{stage}` needs a checkpoint with a trained detector"))),
    };
    match stage {
        StageId::Detector => train_detector(&model, init, data, &sc, hash),
        StageId::Diffusion => train_diffusion(&model, with_fresh_generator(&model, init, seed), data, &sc, &cfg.schedule()?, hash),
        StageId::Regression => train_regression(&model, with_fresh_generator(&model, init, seed), data, &sc, &cfg.schedule()?, hash),
        StageId::Fusion => train_fusion(&model, with_fresh_fusion(&model, init, seed), data, &sc, &cfg.schedule()?, &cfg.fusion, hash),
        StageId::SingleStage => {
            let params = with_fresh_fusion(&model, with_fresh_generator(&model, init, seed), seed);
            train_single_stage(&model, params, data, &sc, &cfg.schedule()?, cfg.single_stage_lambda, hash)
        }
    }
}

/// Fill in generator parameters (projectors, U-Net) that a checkpoint lacks or
/// whose shapes no longer match the configuration, e.g. after changing the
/// conditioning placement in an ablation.
fn with_fresh_generator(model: &Model, mut params: ParamSet<f32>, seed: u64) -> ParamSet<f32> {
    let fresh = model.init_params::<f32>(seed);
    let stale: Vec<String> = params
        .iter()
        .filter(|(k, _)| k.starts_with("proj.") || k.starts_with("unet."))
        .filter(|(k, v)| fresh.get(k).map(|f| f.shape() != v.shape()).unwrap_or(true))
        .map(|(k, _)| k.to_string())
        .collect();
    for k in stale {
        params.remove(&k);
    }
    for (k, v) in fresh.iter().filter(|(k, _)| k.starts_with("proj.") || k.starts_with("unet.")) {
        if !params.contains(k) {
            params.insert(k, v.clone());
        }
    }
    params
}

/// Replace the fusion head with a fresh one for the configured fusion mode.
fn with_fresh_fusion(model: &Model, params: ParamSet<f32>, seed: u64) -> ParamSet<f32> {
    let mut p = ParamSet::new();
    for (k, v) in params.iter().filter(|(k, _)| !k.starts_with("fusion.")) {
        p.insert(k, v.clone());
    }
    p.extend_from(&model.init_params::<f32>(seed).filter_prefixes(&["fusion."]));
    p
}

/// Scores and maps of one evaluation pass over the test split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub detector: Vec<ScoredSample>,
    pub fused: Vec<ScoredSample>,
    pub test_kinds: Vec<Option<ManipulationKind>>,
    /// Generated maps, `H×W` in `[0, 1]`.
    pub maps: Vec<Tensor<f32>>,
    pub localization: LocalizationReport,
    pub group_average: bool,
    pub config_hash: String,
}

impl Evaluation {
    pub fn auc_detector(&self) -> Result<f64> {
        auc(&self.detector, self.group_average)
    }

    pub fn auc_fused(&self) -> Result<f64> {
        auc(&self.fused, self.group_average)
    }

    /// Mean generated-map intensity over samples of `label`.
    pub fn mean_map_intensity(&self, label: Label) -> f64 {
        let picked: Vec<f64> = self
            .detector
            .iter()
            .zip(&self.maps)
            .filter(|(s, _)| s.label == label)
            .map(|(_, m)| m.data().iter().map(|&v| v as f64).sum::<f64>() / m.len() as f64)
            .collect();
        picked.iter().sum::<f64>() / picked.len().max(1) as f64
    }

    /// AUC over the reals plus the fakes of one manipulation kind.
    fn kind_auc(&self, scores: &[ScoredSample], kind: ManipulationKind) -> Option<f64> {
        let subset: Vec<ScoredSample> = scores
            .iter()
            .zip(&self.test_kinds)
            .filter(|(s, k)| s.label == Label::Real || **k == Some(kind))
            .map(|(s, _)| s.clone())
            .collect();
        auc(&subset, self.group_average).ok()
    }

    pub fn metrics(&self) -> Result<Vec<MetricReport>> {
        let h = &self.config_hash;
        let mut rows = vec![
            MetricReport::new("auc_detector", "test", h, self.auc_detector()?),
            MetricReport::new("auc_fused", "test", h, self.auc_fused()?),
        ];
        for kind in ManipulationKind::ALL {
            let split = format!("test/{kind}");
            if let Some(a) = self.kind_auc(&self.detector, kind) {
                rows.push(MetricReport::new("auc_detector", &split, h, a));
            }
            if let Some(a) = self.kind_auc(&self.fused, kind) {
                rows.push(MetricReport::new("auc_fused", &split, h, a));
            }
        }
        rows.push(MetricReport::new("map_mean", "test/real", h, self.mean_map_intensity(Label::Real)));
        rows.push(MetricReport::new("map_mean", "test/fake", h, self.mean_map_intensity(Label::Fake)));
        rows.extend(self.localization.metrics());
        Ok(rows)
    }
}
