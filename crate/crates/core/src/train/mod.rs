//! Staged training: detector pretraining, diffusion training against a frozen
//! detector, fusion training against a frozen generator, and the
//! direct-regression and single-stage trainers used for comparison.

mod data;
mod infer;
mod record;
mod trainers;
#[cfg(test)]
use trainers::optimize;

use std::fmt;
use std::str::FromStr;

pub use data::{detector_features, TrainData};
pub use infer::{detector_scores, fusion_scores, generate_maps, map_seed, regression_maps};
pub use record::{write_timings, RunRecord, RECORD_HEADER, TIMING_HEADER};
pub use trainers::{train_detector, train_diffusion, train_fusion, train_regression, train_single_stage, FusionOptions};

use crate::error::{Error, Result};
use crate::nets::{DETECTOR_PREFIX, FUSION_PREFIX, PROJ_PREFIX, UNET_PREFIX};
use crate::optim::{cosine_lr, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageId {
    Detector,
    Diffusion,
    Fusion,
    Regression,
    SingleStage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    NoiseMse,
    /// Direct MSE between the predicted and GT map.
    MapMse,
    /// Noise MSE plus weighted cross-entropy.
    Joint,
}

impl StageId {
    pub const ALL: [StageId; 5] = [StageId::Detector, StageId::Diffusion, StageId::Fusion, StageId::Regression, StageId::SingleStage];

    pub fn name(self) -> &'static str {
        match self {
            StageId::Detector => "detector",
            StageId::Diffusion => "diffusion",
            StageId::Fusion => "fusion",
            StageId::Regression => "regression",
            StageId::SingleStage => "single-stage",
        }
    }

    /// Config section holding the stage's hyperparameters.
    pub fn section(self) -> &'static str {
        match self {
            StageId::Detector => "train.stage0",
            StageId::Diffusion => "train.stage1",
            StageId::Fusion => "train.stage2",
            StageId::Regression => "train.regression",
            StageId::SingleStage => "train.single",
        }
    }

    /// Parameter prefixes the stage optimizes.
    pub fn trainable(self) -> &'static [&'static str] {
        match self {
            StageId::Detector => &[DETECTOR_PREFIX],
            StageId::Diffusion | StageId::Regression => &[PROJ_PREFIX, UNET_PREFIX],
            StageId::Fusion => &[FUSION_PREFIX],
            StageId::SingleStage => &[PROJ_PREFIX, UNET_PREFIX, FUSION_PREFIX],
        }
    }

    /// Parameter prefixes that must be byte-identical after the stage.
    pub fn frozen(self) -> &'static [&'static str] {
        match self {
            StageId::Detector => &[PROJ_PREFIX, UNET_PREFIX, FUSION_PREFIX],
            StageId::Diffusion | StageId::Regression => &[DETECTOR_PREFIX, FUSION_PREFIX],
            StageId::Fusion => &[DETECTOR_PREFIX, PROJ_PREFIX, UNET_PREFIX],
            StageId::SingleStage => &[DETECTOR_PREFIX],
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            StageId::Detector | StageId::Fusion => LossKind::CrossEntropy,
            StageId::Diffusion => LossKind::NoiseMse,
            StageId::Regression => LossKind::MapMse,
            StageId::SingleStage => LossKind::Joint,
        }
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageId::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown training stage `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LrSchedule::Cosine),
            "constant" => Ok(LrSchedule::Constant),
            _ => Err(Error::InvalidParam(format!("unknown LR schedule `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: StageId,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub schedule: LrSchedule,
    /// Final learning rate of the cosine schedule.
    pub lr_min: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn defaults(stage: StageId) -> Self {
        let (epochs, lr, schedule) = match stage {
            StageId::Detector => (10, 1e-3, LrSchedule::Cosine),
            StageId::Diffusion | StageId::Regression | StageId::SingleStage => (30, 3e-3, LrSchedule::Cosine),
            StageId::Fusion => (5, 5e-5, LrSchedule::Constant),
        };
        Self {
            stage,
            epochs,
            batch_size: 32,
            optim: AdamWConfig { lr, ..AdamWConfig::default() },
            schedule,
            lr_min: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        let bad = |m: &str| Err(Error::InvalidParam(format!("{}: {m}", self.stage.section())));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(0.0..=o.lr).contains(&self.lr_min) {
            return bad("need 0 <= lr_min <= lr with lr > 0");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return bad("optimizer hyperparameters out of range");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        match self.schedule {
            LrSchedule::Cosine => cosine_lr(step, total_steps, self.optim.lr, self.lr_min),
            LrSchedule::Constant => Ok(self.optim.lr),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    /// Maps drawn from the frozen diffusion sampler.
    Sampled,
    /// GT DSSIM maps.
    GroundTruth,
}

impl MapSource {
    pub fn name(self) -> &'static str {
        match self {
            MapSource::Sampled => "sampled",
            MapSource::GroundTruth => "gt",
        }
    }
}

impl FromStr for MapSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(MapSource::Sampled),
            "gt" => Ok(MapSource::GroundTruth),
            _ => Err(Error::InvalidParam(format!("unknown map source `{s}`"))),
        }
    }
}

#[cfg(test)]
mod tests;
