//! Network architectures assembled from the layer set.
//!
//! Every module caches the inputs of its layers during `forward` and replays
//! them in reverse during `backward`, accumulating parameter gradients into a
//! [`ParamSet`] keyed by the canonical `module.stage.layer.kind` names.

mod detector;
mod fusion;
mod model;
mod projector;
mod unet;

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::layers::{Layer, LayerSpec};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use detector::{Detector, DetectorCache, DetectorConfig, DetectorOutput};
pub use fusion::{gate_fuse, FusionCache, FusionHead, FusionMode};
pub use model::{Model, ModelConfig, DETECTOR_PREFIX, FUSION_PREFIX, PROJ_PREFIX, UNET_PREFIX};
pub use projector::{Placement, ProjectorCache, Projectors};
pub use unet::{timestep_embedding, Conditions, UNet, UNetCache, UNetConfig, UNET_STAGES};

/// Layers applied in sequence.
#[derive(Clone, Debug)]
pub struct Chain {
    pub layers: Vec<Layer>,
}

/// Inputs of each layer of a [`Chain`], recorded by `forward`.
#[derive(Clone, Debug)]
pub struct ChainCache<S> {
    inputs: Vec<Tensor<S>>,
}

impl Chain {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// `conv 3×3 (stride, same padding) → group norm → activation`, named
    /// `{stage}.conv{tag}`, `{stage}.norm{tag}`, `{stage}.act{tag}`.
    pub fn conv_block(stage: &str, tag: &str, in_ch: usize, out_ch: usize, stride: usize, act: LayerSpec) -> Self {
        Self::new(vec![
            Layer::new(format!("{stage}.conv{tag}"), LayerSpec::conv(in_ch, out_ch, 3, stride, 1)),
            Layer::new(format!("{stage}.norm{tag}"), LayerSpec::group_norm(out_ch)),
            Layer::new(format!("{stage}.act{tag}"), act),
        ])
    }

    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, params: &mut ParamSet<S>) {
        for l in &self.layers {
            l.init_params(rng, params);
        }
    }

    pub fn forward<S: Scalar>(&self, x: &Tensor<S>, params: &ParamSet<S>) -> Result<(Tensor<S>, ChainCache<S>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let y = l.forward(&h, params)?;
            inputs.push(h);
            h = y;
        }
        Ok((h, ChainCache { inputs }))
    }

    pub fn infer<S: Scalar>(&self, x: &Tensor<S>, params: &ParamSet<S>) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h, params)?;
        }
        Ok(h)
    }

    pub fn backward<S: Scalar>(
        &self,
        cache: &ChainCache<S>,
        params: &ParamSet<S>,
        grad: &Tensor<S>,
        grads: &mut ParamSet<S>,
    ) -> Result<Tensor<S>> {
        let mut g = grad.clone();
        for (l, x) in self.layers.iter().zip(&cache.inputs).rev() {
            g = l.backward_into(x, params, &g, grads)?;
        }
        Ok(g)
    }
}

/// `x[n, c, :, :] += bias[n, c]`.
pub fn add_channel_bias<S: Scalar>(x: &mut Tensor<S>, bias: &Tensor<S>) -> Result<()> {
    let (n, c, h, w) = x.dims4()?;
    if bias.shape() != [n, c] {
        return Err(shape_err!("channel bias {:?} does not fit {:?}", bias.shape(), x.shape()));
    }
    let plane = h * w;
    for (p, &b) in bias.data().iter().enumerate() {
        for v in &mut x.data_mut()[p * plane..(p + 1) * plane] {
            *v += b;
        }
    }
    Ok(())
}

/// Spatial sum per `(n, c)`: the gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_sums<S: Scalar>(g: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = g.dims4()?;
    let plane = h * w;
    Ok(Tensor::from_fn(&[n, c], |p| g.data()[p * plane..(p + 1) * plane].iter().fold(S::zero(), |a, &v| a + v)))
}

#[cfg(test)]
mod tests;
