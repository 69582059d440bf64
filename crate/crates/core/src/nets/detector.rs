use rand::Rng;

use super::{Chain, ChainCache};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Layer, LayerSpec};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub in_ch: usize,
    /// Output channels of the four stages.
    pub channels: [usize; 4],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { in_ch: 3, channels: [16, 32, 64, 128] }
    }
}

/// Stem at full resolution, then four stages that each halve the resolution.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    stem: Chain,
    stages: Vec<Chain>,
    pool: Layer,
    head: Layer,
}

#[derive(Clone, Debug)]
pub struct DetectorOutput<S> {
    /// Stage outputs `f1..f4`; `f4` is also the final-stage feature used for fusion.
    pub pyramid: Vec<Tensor<S>>,
    pub logits: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct DetectorCache<S> {
    stem: ChainCache<S>,
    stages: Vec<ChainCache<S>>,
    f4: Tensor<S>,
    pooled: Tensor<S>,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        if config.in_ch == 0 || config.channels.contains(&0) {
            return Err(Error::InvalidParam("detector channels must be positive".into()));
        }
        let c = config.channels;
        let gelu = || LayerSpec::Gelu;
        let stem = Chain::conv_block("detector.stem", "", config.in_ch, c[0], 1, gelu());
        let stages = (0..4)
            .map(|i| {
                let cin = if i == 0 { c[0] } else { c[i - 1] };
                let p = format!("detector.stage{}", i + 1);
                let mut a = Chain::conv_block(&p, "1", cin, c[i], 2, gelu());
                a.layers.extend(Chain::conv_block(&p, "2", c[i], c[i], 1, gelu()).layers);
                a
            })
            .collect();
        Ok(Self {
            stem,
            stages,
            pool: Layer::new("detector.head.pool", LayerSpec::GlobalAvgPool),
            head: Layer::new("detector.head.fc", LayerSpec::Linear { in_features: c[3], out_features: 2 }),
            config,
        })
    }

    /// Stage output shapes `C×H×W` for a square input of side `size`.
    pub fn stage_shapes(&self, size: usize) -> Vec<[usize; 3]> {
        (0..4).map(|i| [self.config.channels[i], size >> (i + 1), size >> (i + 1)]).collect()
    }

    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, params: &mut ParamSet<S>) {
        self.stem.init_params(rng, params);
        for s in &self.stages {
            s.init_params(rng, params);
        }
        self.head.init_params(rng, params);
    }

    fn check_input<S: Scalar>(&self, img: &Tensor<S>) -> Result<()> {
        let s = img.shape();
        if s.len() != 4 || s[1] != self.config.in_ch || s[2] % 16 != 0 || s[3] % 16 != 0 || s[2] == 0 {
            return Err(shape_err!(
                "detector expects N×{}×H×W with H, W positive multiples of 16, got {:?}",
                self.config.in_ch,
                s
            ));
        }
        Ok(())
    }

    pub fn forward<S: Scalar>(&self, img: &Tensor<S>, params: &ParamSet<S>) -> Result<(DetectorOutput<S>, DetectorCache<S>)> {
        self.check_input(img)?;
        let (mut h, stem) = self.stem.forward(img, params)?;
        let mut pyramid = Vec::with_capacity(4);
        let mut stages = Vec::with_capacity(4);
        for s in &self.stages {
            let (y, c) = s.forward(&h, params)?;
            stages.push(c);
            pyramid.push(y.clone());
            h = y;
        }
        let pooled = self.pool.forward(&h, params)?;
        let logits = self.head.forward(&pooled, params)?;
        Ok((DetectorOutput { pyramid, logits }, DetectorCache { stem, stages, f4: h, pooled }))
    }

    pub fn infer<S: Scalar>(&self, img: &Tensor<S>, params: &ParamSet<S>) -> Result<DetectorOutput<S>> {
        self.check_input(img)?;
        let mut h = self.stem.infer(img, params)?;
        let mut pyramid = Vec::with_capacity(4);
        for s in &self.stages {
            h = s.infer(&h, params)?;
            pyramid.push(h.clone());
        }
        let logits = self.head.forward(&self.pool.forward(&h, params)?, params)?;
        Ok(DetectorOutput { pyramid, logits })
    }

    /// Backpropagate logit gradients plus optional gradients arriving at each stage output.
    pub fn backward<S: Scalar>(
        &self,
        cache: &DetectorCache<S>,
        params: &ParamSet<S>,
        grad_logits: Option<&Tensor<S>>,
        grad_pyramid: &[Option<Tensor<S>>],
        grads: &mut ParamSet<S>,
    ) -> Result<Tensor<S>> {
        let mut g = match grad_logits {
            Some(gl) => {
                let gp = self.head.backward_into(&cache.pooled, params, gl, grads)?;
                self.pool.backward_into(&cache.f4, params, &gp, grads)?
            }
            None => Tensor::zeros(cache.f4.shape()),
        };
        for i in (0..4).rev() {
            if let Some(Some(extra)) = grad_pyramid.get(i) {
                g.add_assign(extra)?;
            }
            g = self.stages[i].backward(&cache.stages[i], params, &g, grads)?;
        }
        self.stem.backward(&cache.stem, params, &g, grads)
    }
}
