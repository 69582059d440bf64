use super::{Detector, DetectorConfig, FusionHead, FusionMode, Placement, Projectors, UNet, UNetConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::child_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DETECTOR_PREFIX: &str = "detector.";
pub const PROJ_PREFIX: &str = "proj.";
pub const UNET_PREFIX: &str = "unet.";
pub const FUSION_PREFIX: &str = "fusion.";

/// Initial gate bias: the fused head starts out close to the detector alone.
pub const GATE_INIT_BIAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub detector: DetectorConfig,
    pub unet: UNetConfig,
    pub placement: Placement,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            detector: DetectorConfig::default(),
            unet: UNetConfig::default(),
            placement: Placement::EncoderAll,
            fusion: FusionMode::Gating,
        }
    }
}

/// All four networks for one configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub detector: Detector,
    pub projectors: Projectors,
    pub unet: UNet,
    pub fusion: FusionHead,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let s = config.image_size;
        if s == 0 || s % 16 != 0 {
            return Err(Error::InvalidParam(format!("image size must be a positive multiple of 16, got {s}")));
        }
        let detector = Detector::new(config.detector.clone())?;
        let unet = UNet::new(config.unet.clone())?;
        let projectors = Projectors::new(config.placement, &detector.stage_shapes(s), &unet.stage_shapes(s))?;
        let fusion = FusionHead::new(config.fusion, config.detector.channels);
        Ok(Self { config, detector, projectors, unet, fusion })
    }

    /// Fresh parameters for every module, each drawn from its own stream of `seed`.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamSet<S> {
        let mut p = ParamSet::new();
        self.detector.init_params(&mut child_rng(seed, "init/detector", 0), &mut p);
        self.projectors.init_params(&mut child_rng(seed, "init/projectors", 0), &mut p);
        self.unet.init_params(&mut child_rng(seed, "init/unet", 0), &mut p);
        self.fusion.init_params(&mut child_rng(seed, "init/fusion", 0), &mut p);
        p
    }

    /// Start the fusion classifier from the trained detector head and bias the gate towards detector features.
    pub fn warm_start_fusion<S: Scalar>(&self, params: &mut ParamSet<S>) -> Result<()> {
        for kind in ["weight", "bias"] {
            let t = params.get(&format!("detector.head.fc.{kind}"))?.clone();
            params.insert(format!("fusion.head.fc.{kind}"), t);
        }
        if self.config.fusion == FusionMode::Gating {
            let b = params.get_mut(&format!("{}.bias", super::fusion::GATE_CONV))?;
            *b = Tensor::full(b.shape(), S::lit(GATE_INIT_BIAS));
        }
        Ok(())
    }

    /// Probability of the fake class for each row of 2-class logits.
    pub fn fake_probability<S: Scalar>(logits: &Tensor<S>) -> Result<Vec<f64>> {
        let p = crate::layers::softmax(logits)?;
        Ok(p.data().chunks(2).map(|r| r[1].as_f64()).collect())
    }
}
