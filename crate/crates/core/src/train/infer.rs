//! Batched inference: detector scores, sampled and regressed maps, fused scores.

use super::data::{gather, gather_level, gather_pyramid, scatter, sequential_batches};
use crate::diffusion::{from_diffusion_range, sample, NoiseSchedule, SamplerConfig};
use crate::error::Result;
use crate::nets::Model;
use crate::params::ParamSet;
use crate::rng::seed_u64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Sampling seed of one sample's map. Round 0 is the cached map; later rounds
/// are used when maps are redrawn every epoch.
pub fn map_seed(seed: u64, id: usize, round: usize) -> u64 {
    if round == 0 {
        seed_u64(seed, "sampling", id as u64)
    } else {
        seed_u64(seed, &format!("sampling/round{round}"), id as u64)
    }
}

/// Fake-class probability from the detector alone.
pub fn detector_scores<S: Scalar>(model: &Model, params: &ParamSet<S>, images: &[Tensor<S>], batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for idx in sequential_batches(images.len(), batch) {
        let logits = model.detector.infer(&gather(images, &idx)?, params)?.logits;
        out.extend(Model::fake_probability(&logits)?);
    }
    Ok(out)
}

/// Diffusion-sampled `[0, 1]` maps (`1×1×H×W` each) conditioned on cached pyramids.
pub fn generate_maps<S: Scalar>(
    model: &Model,
    params: &ParamSet<S>,
    pyramids: &[Vec<Tensor<S>>],
    seeds: &[u64],
    sched: &NoiseSchedule,
    sampler: SamplerConfig,
    batch: usize,
) -> Result<Vec<Tensor<S>>> {
    let s = model.config.image_size;
    let mut out = Vec::with_capacity(pyramids.len());
    for idx in sequential_batches(pyramids.len(), batch) {
        let conds = model.projectors.infer(&gather_pyramid(pyramids, &idx)?, params)?;
        let predictor = |xt: &Tensor<S>, ts: &[f64]| model.unet.infer(xt, ts, &conds, params);
        let item_seeds: Vec<u64> = idx.iter().map(|&i| seeds[i]).collect();
        let maps = sample(&predictor, &[idx.len(), 1, s, s], sched, &item_seeds, sampler)?;
        out.extend(scatter(&maps)?);
    }
    Ok(out)
}

/// One-pass maps of the direct-regression model: zero input at the final timestep.
pub fn regression_maps<S: Scalar>(
    model: &Model,
    params: &ParamSet<S>,
    pyramids: &[Vec<Tensor<S>>],
    sched: &NoiseSchedule,
    batch: usize,
) -> Result<Vec<Tensor<S>>> {
    let s = model.config.image_size;
    let mut out = Vec::with_capacity(pyramids.len());
    for idx in sequential_batches(pyramids.len(), batch) {
        let conds = model.projectors.infer(&gather_pyramid(pyramids, &idx)?, params)?;
        let ts = vec![sched.steps() as f64; idx.len()];
        let pred = model.unet.infer(&Tensor::zeros(&[idx.len(), 1, s, s]), &ts, &conds, params)?;
        out.extend(scatter(&from_diffusion_range(&pred))?);
    }
    Ok(out)
}

/// Fake-class probability of the fusion classifier given maps and detector pyramids.
pub fn fusion_scores<S: Scalar>(
    model: &Model,
    params: &ParamSet<S>,
    maps: &[Tensor<S>],
    pyramids: &[Vec<Tensor<S>>],
    batch: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(maps.len());
    for idx in sequential_batches(maps.len(), batch) {
        let logits = model.fusion.infer(&gather(maps, &idx)?, &gather_level(pyramids, 3, &idx)?, params)?;
        out.extend(Model::fake_probability(&logits)?);
    }
    Ok(out)
}
