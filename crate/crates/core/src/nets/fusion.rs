use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{Chain, ChainCache};
use crate::error::{shape_err, Error, Result};
use crate::layers::{sigmoid, Layer, LayerSpec};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// `g ⊙ f_det + (1 − g) ⊙ f_art` with `g = σ(conv1×1([f_art ‖ f_det]))`.
    Gating,
    Addition,
    Hadamard,
    /// Channel concatenation followed by a `1×1` conv back to the base width.
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [FusionMode::Gating, FusionMode::Addition, FusionMode::Hadamard, FusionMode::Concat];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Gating => "gating",
            FusionMode::Addition => "addition",
            FusionMode::Hadamard => "hadamard",
            FusionMode::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown fusion mode `{s}`")))
    }
}

pub const GATE_CONV: &str = "fusion.gate.conv";
pub const CONCAT_CONV: &str = "fusion.concat.conv";

enum FuseCache<S> {
    Gating { joint: Tensor<S>, pre: Tensor<S> },
    Addition,
    Hadamard,
    Concat { joint: Tensor<S> },
}

/// Combine artifact features with detector features.
pub fn gate_fuse<S: Scalar>(f_art: &Tensor<S>, f_det: &Tensor<S>, mode: FusionMode, params: &ParamSet<S>) -> Result<Tensor<S>> {
    let c = f_det.dims4()?.1;
    Ok(fuse_forward(f_art, f_det, mode, &gate_layer(c), &concat_layer(c), params)?.0)
}

fn gate_layer(c: usize) -> Layer {
    Layer::new(GATE_CONV, LayerSpec::conv(2 * c, c, 1, 1, 0))
}

fn concat_layer(c: usize) -> Layer {
    Layer::new(CONCAT_CONV, LayerSpec::conv(2 * c, c, 1, 1, 0))
}

fn fuse_forward<S: Scalar>(
    f_art: &Tensor<S>,
    f_det: &Tensor<S>,
    mode: FusionMode,
    gate: &Layer,
    concat: &Layer,
    params: &ParamSet<S>,
) -> Result<(Tensor<S>, FuseCache<S>)> {
    if f_art.shape() != f_det.shape() {
        return Err(shape_err!("fusion inputs differ: {:?} vs {:?}", f_art.shape(), f_det.shape()));
    }
    Ok(match mode {
        FusionMode::Gating => {
            let joint = Tensor::concat_channels(f_art, f_det)?;
            let pre = gate.forward(&joint, params)?;
            let fused = Tensor::from_fn(f_det.shape(), |i| {
                let g = sigmoid(pre.data()[i]);
                g * f_det.data()[i] + (S::one() - g) * f_art.data()[i]
            });
            (fused, FuseCache::Gating { joint, pre })
        }
        FusionMode::Addition => (f_art.add(f_det)?, FuseCache::Addition),
        FusionMode::Hadamard => (f_art.mul(f_det)?, FuseCache::Hadamard),
        FusionMode::Concat => {
            let joint = Tensor::concat_channels(f_art, f_det)?;
            (concat.forward(&joint, params)?, FuseCache::Concat { joint })
        }
    })
}

/// Artifact extractor, fusion and `GAP → linear` classifier.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub mode: FusionMode,
    extractor: Vec<Chain>,
    gate: Layer,
    concat: Layer,
    pool: Layer,
    head: Layer,
}

pub struct FusionCache<S> {
    extractor: Vec<ChainCache<S>>,
    f_art: Tensor<S>,
    f_det: Tensor<S>,
    fuse: FuseCache<S>,
    fused: Tensor<S>,
    pooled: Tensor<S>,
}

impl FusionHead {
    /// `channels` is the detector's stage plan; the extractor mirrors it so its
    /// output matches the final-stage features in shape.
    pub fn new(mode: FusionMode, channels: [usize; 4]) -> Self {
        let extractor = (0..4)
            .map(|i| {
                let cin = if i == 0 { 1 } else { channels[i - 1] };
                let stage = format!("fusion.extract.stage{}", i + 1);
                Chain::new(vec![
                    Layer::new(format!("{stage}.conv"), LayerSpec::conv(cin, channels[i], 3, 2, 1)),
                    Layer::new(format!("{stage}.act"), LayerSpec::Silu),
                ])
            })
            .collect();
        let c = channels[3];
        Self {
            mode,
            extractor,
            gate: gate_layer(c),
            concat: concat_layer(c),
            pool: Layer::new("fusion.head.pool", LayerSpec::GlobalAvgPool),
            head: Layer::new("fusion.head.fc", LayerSpec::Linear { in_features: c, out_features: 2 }),
        }
    }

    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, params: &mut ParamSet<S>) {
        for e in &self.extractor {
            e.init_params(rng, params);
        }
        match self.mode {
            FusionMode::Gating => self.gate.init_params(rng, params),
            FusionMode::Concat => self.concat.init_params(rng, params),
            FusionMode::Addition | FusionMode::Hadamard => {}
        }
        self.head.init_params(rng, params);
    }

    /// `GAP → linear` over fused features.
    pub fn classify<S: Scalar>(&self, fused: &Tensor<S>, params: &ParamSet<S>) -> Result<Tensor<S>> {
        self.head.forward(&self.pool.forward(fused, params)?, params)
    }

    /// Artifact features of a `N×1×H×W` map in `[0, 1]`.
    pub fn extract<S: Scalar>(&self, map: &Tensor<S>, params: &ParamSet<S>) -> Result<Tensor<S>> {
        let mut h = map.clone();
        for e in &self.extractor {
            h = e.infer(&h, params)?;
        }
        Ok(h)
    }

    pub fn forward<S: Scalar>(&self, map: &Tensor<S>, f_det: &Tensor<S>, params: &ParamSet<S>) -> Result<(Tensor<S>, FusionCache<S>)> {
        let mut h = map.clone();
        let mut extractor = Vec::with_capacity(4);
        for e in &self.extractor {
            let (y, c) = e.forward(&h, params)?;
            extractor.push(c);
            h = y;
        }
        let (fused, fuse) = fuse_forward(&h, f_det, self.mode, &self.gate, &self.concat, params)?;
        let pooled = self.pool.forward(&fused, params)?;
        let logits = self.head.forward(&pooled, params)?;
        Ok((logits, FusionCache { extractor, f_art: h, f_det: f_det.clone(), fuse, fused, pooled }))
    }

    pub fn infer<S: Scalar>(&self, map: &Tensor<S>, f_det: &Tensor<S>, params: &ParamSet<S>) -> Result<Tensor<S>> {
        let f_art = self.extract(map, params)?;
        let fused = fuse_forward(&f_art, f_det, self.mode, &self.gate, &self.concat, params)?.0;
        self.classify(&fused, params)
    }

    /// Returns gradients with respect to the map and the detector features.
    pub fn backward<S: Scalar>(
        &self,
        cache: &FusionCache<S>,
        params: &ParamSet<S>,
        grad_logits: &Tensor<S>,
        grads: &mut ParamSet<S>,
    ) -> Result<(Tensor<S>, Tensor<S>)> {
        let gp = self.head.backward_into(&cache.pooled, params, grad_logits, grads)?;
        let g = self.pool.backward_into(&cache.fused, params, &gp, grads)?;
        let (fa, fd) = (&cache.f_art, &cache.f_det);
        let (g_art, g_det) = match &cache.fuse {
            FuseCache::Gating { joint, pre } => {
                let n = g.len();
                let mut ga = Tensor::zeros(g.shape());
                let mut gd = Tensor::zeros(g.shape());
                let mut gpre = Tensor::zeros(g.shape());
                for i in 0..n {
                    let s = sigmoid(pre.data()[i]);
                    let gi = g.data()[i];
                    gd.data_mut()[i] = gi * s;
                    ga.data_mut()[i] = gi * (S::one() - s);
                    gpre.data_mut()[i] = gi * (fd.data()[i] - fa.data()[i]) * s * (S::one() - s);
                }
                let gj = self.gate.backward_into(joint, params, &gpre, grads)?;
                let (ja, jd) = gj.split_channels(fa.shape()[1])?;
                (ga.add(&ja)?, gd.add(&jd)?)
            }
            FuseCache::Addition => (g.clone(), g),
            FuseCache::Hadamard => (g.mul(fd)?, g.mul(fa)?),
            FuseCache::Concat { joint } => {
                let gj = self.concat.backward_into(joint, params, &g, grads)?;
                gj.split_channels(fa.shape()[1])?
            }
        };
        let mut gm = g_art;
        for (e, c) in self.extractor.iter().zip(&cache.extractor).rev() {
            gm = e.backward(c, params, &gm, grads)?;
        }
        Ok((gm, g_det))
    }
}
