//! The five trainers and their shared optimization loop.

use std::time::Instant;

use super::data::{detector_features, epoch_batches, gather, gather_level, gather_pyramid, TrainData};
use super::infer::{generate_maps, map_seed};
use super::record::RunRecord;
use super::{MapSource, StageConfig, StageId};
use crate::diffusion::{draw_training_noise, q_sample_batch, to_diffusion_range, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::layers::{mse_loss, softmax_cross_entropy};
use crate::nets::Model;
use crate::optim::AdamW;
use crate::params::{has_prefix, ParamSet};
use crate::rng::child_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Batch size for frozen-network inference inside the trainers.
const INFER_BATCH: usize = 64;

/// Loss values for the record (optimized loss first) and the batch gradients.
type StepOutput<S> = (Vec<f64>, ParamSet<S>);

/// Shuffled mini-batch AdamW over `n` samples. Only gradients of the stage's
/// trainable prefixes reach the optimizer, and the frozen prefixes are
/// verified byte-identical afterwards.
pub(super) fn optimize<S: Scalar>(
    sc: &StageConfig,
    n: usize,
    params: &mut ParamSet<S>,
    curve_names: &[&str],
    config_hash: &str,
    mut step: impl FnMut(usize, &[usize], u64, &ParamSet<S>) -> Result<StepOutput<S>>,
) -> Result<RunRecord> {
    sc.validate()?;
    let start = Instant::now();
    let stage = sc.stage;
    if !params.names().any(|k| has_prefix(k, stage.trainable())) {
        return Err(Error::MissingParam(format!("{} parameters for stage {stage}", stage.trainable().join(", "))));
    }
    let frozen_before = params.digest(stage.frozen());
    let total = sc.epochs * n.div_ceil(sc.batch_size);
    let mut opt = AdamW::new(sc.optim);
    let mut curves: Vec<Vec<f64>> = vec![Vec::with_capacity(sc.epochs); curve_names.len()];
    let mut global = 0usize;
    let stream = format!("shuffle/{}", stage.name());
    for epoch in 0..sc.epochs {
        let mut sums = vec![0.0; curve_names.len()];
        for idx in epoch_batches(n, sc.batch_size, sc.seed, &stream, epoch) {
            let (losses, grads) = step(epoch, &idx, global as u64, params)?;
            if let Some(&loss) = losses.iter().find(|l| !l.is_finite()) {
                return Err(Error::Divergence { epoch: epoch + 1, step: global, loss });
            }
            opt.set_lr(sc.lr_at(global, total)?);
            opt.step(params, &grads.filter_prefixes(stage.trainable()))?;
            for (s, l) in sums.iter_mut().zip(&losses) {
                *s += l * idx.len() as f64;
            }
            global += 1;
        }
        for (c, s) in curves.iter_mut().zip(sums) {
            c.push(s / n as f64);
        }
    }
    if params.digest(stage.frozen()) != frozen_before {
        return Err(Error::FrozenMutation(format!("{} during stage {stage}", stage.frozen().join(", "))));
    }
    Ok(RunRecord {
        stage,
        curves: curve_names.iter().map(|s| s.to_string()).zip(curves).collect(),
        checkpoint: None,
        config_hash: config_hash.to_string(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

fn expect_stage(sc: &StageConfig, stage: StageId) -> Result<()> {
    if sc.stage != stage {
        return Err(Error::InvalidParam(format!("config for stage {} passed to the {stage} trainer", sc.stage)));
    }
    Ok(())
}

/// Per-element timesteps as the U-Net's float input.
fn as_f64(ts: &[usize]) -> Vec<f64> {
    ts.iter().map(|&t| t as f64).collect()
}

/// Stage 0: cross-entropy on real/fake labels.
pub fn train_detector<S: Scalar>(
    model: &Model,
    mut params: ParamSet<S>,
    data: &TrainData<S>,
    sc: &StageConfig,
    config_hash: &str,
) -> Result<(ParamSet<S>, RunRecord)> {
    expect_stage(sc, StageId::Detector)?;
    data.check_size(model)?;
    let record = optimize(sc, data.len(), &mut params, &["loss"], config_hash, |_, idx, _, p| {
        let (out, cache) = model.detector.forward(&gather(&data.images, idx)?, p)?;
        let (loss, g) = softmax_cross_entropy(&out.logits, &data.one_hot(idx))?;
        let mut grads = ParamSet::new();
        model.detector.backward(&cache, p, Some(&g), &[], &mut grads)?;
        Ok((vec![loss.as_f64()], grads))
    })?;
    Ok((params, record))
}

/// Stage 1: noise-prediction MSE with the detector frozen. Real samples carry
/// all-zero GT maps.
pub fn train_diffusion<S: Scalar>(
    model: &Model,
    mut params: ParamSet<S>,
    data: &TrainData<S>,
    sc: &StageConfig,
    sched: &NoiseSchedule,
    config_hash: &str,
) -> Result<(ParamSet<S>, RunRecord)> {
    expect_stage(sc, StageId::Diffusion)?;
    data.check_size(model)?;
    let pyramids = detector_features(model, &params, &data.images, INFER_BATCH)?;
    let record = optimize(sc, data.len(), &mut params, &["loss"], config_hash, |_, idx, step, p| {
        let x0 = to_diffusion_range(&gather(&data.maps, idx)?);
        let (ts, eps) = draw_training_noise::<S, _>(&mut child_rng(sc.seed, "diffusion-t", step), x0.shape(), sched);
        let xt = q_sample_batch(&x0, &ts, &eps, sched)?;
        let (conds, pcache) = model.projectors.forward(&gather_pyramid(&pyramids, idx)?, p)?;
        let (pred, ucache) = model.unet.forward(&xt, &as_f64(&ts), &conds, p)?;
        let (loss, g) = mse_loss(&pred, &eps)?;
        let mut grads = ParamSet::new();
        let (_, cond_grads) = model.unet.backward(&ucache, p, &g, &mut grads)?;
        model.projectors.backward(&pcache, p, &cond_grads, &mut grads)?;
        Ok((vec![loss.as_f64()], grads))
    })?;
    Ok((params, record))
}

/// Direct-regression baseline: the same conditioned U-Net maps a zero input at
/// the final timestep straight to the GT map (in `[−1, 1]`) under MSE.
pub fn train_regression<S: Scalar>(
    model: &Model,
    mut params: ParamSet<S>,
    data: &TrainData<S>,
    sc: &StageConfig,
    sched: &NoiseSchedule,
    config_hash: &str,
) -> Result<(ParamSet<S>, RunRecord)> {
    expect_stage(sc, StageId::Regression)?;
    data.check_size(model)?;
    let pyramids = detector_features(model, &params, &data.images, INFER_BATCH)?;
    let t_fixed = sched.steps() as f64;
    let record = optimize(sc, data.len(), &mut params, &["loss"], config_hash, |_, idx, _, p| {
        let x0 = to_diffusion_range(&gather(&data.maps, idx)?);
        let (conds, pcache) = model.projectors.forward(&gather_pyramid(&pyramids, idx)?, p)?;
        let zeros = Tensor::zeros(x0.shape());
        let (pred, ucache) = model.unet.forward(&zeros, &vec![t_fixed; idx.len()], &conds, p)?;
        let (loss, g) = mse_loss(&pred, &x0)?;
        let mut grads = ParamSet::new();
        let (_, cond_grads) = model.unet.backward(&ucache, p, &g, &mut grads)?;
        model.projectors.backward(&pcache, p, &cond_grads, &mut grads)?;
        Ok((vec![loss.as_f64()], grads))
    })?;
    Ok((params, record))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionOptions {
    pub map_source: MapSource,
    /// Redraw sampled maps at the start of every epoch instead of caching one per sample.
    pub resample_each_epoch: bool,
    pub sampler: SamplerConfig,
    pub sample_batch: usize,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self { map_source: MapSource::Sampled, resample_each_epoch: false, sampler: SamplerConfig::default(), sample_batch: INFER_BATCH }
    }
}

/// Stage 2: cross-entropy of the fusion classifier with the detector,
/// projectors and U-Net frozen. Sampled maps use the per-sample seeds of
/// [`map_seed`], derived from the stage seed.
pub fn train_fusion<S: Scalar>(
    model: &Model,
    mut params: ParamSet<S>,
    data: &TrainData<S>,
    sc: &StageConfig,
    sched: &NoiseSchedule,
    opts: &FusionOptions,
    config_hash: &str,
) -> Result<(ParamSet<S>, RunRecord)> {
    expect_stage(sc, StageId::Fusion)?;
    data.check_size(model)?;
    let pyramids = detector_features(model, &params, &data.images, INFER_BATCH)?;
    model.warm_start_fusion(&mut params)?;
    let draw = |round: usize, p: &ParamSet<S>| -> Result<Vec<Tensor<S>>> {
        match opts.map_source {
            MapSource::GroundTruth => Ok(data.maps.clone()),
            MapSource::Sampled => {
                let seeds: Vec<u64> = data.ids.iter().map(|&id| map_seed(sc.seed, id, round)).collect();
                generate_maps(model, p, &pyramids, &seeds, sched, opts.sampler, opts.sample_batch)
            }
        }
    };
    let mut maps = draw(0, &params)?;
    let mut maps_round = 0;
    let record = optimize(sc, data.len(), &mut params, &["loss"], config_hash, |epoch, idx, _, p| {
        if opts.resample_each_epoch && opts.map_source == MapSource::Sampled && epoch != maps_round {
            maps = draw(epoch, p)?;
            maps_round = epoch;
        }
        let f4 = gather_level(&pyramids, 3, idx)?;
        let (logits, cache) = model.fusion.forward(&gather(&maps, idx)?, &f4, p)?;
        let (loss, g) = softmax_cross_entropy(&logits, &data.one_hot(idx))?;
        let mut grads = ParamSet::new();
        model.fusion.backward(&cache, p, &g, &mut grads)?;
        Ok((vec![loss.as_f64()], grads))
    })?;
    Ok((params, record))
}

/// Joint training of projectors, U-Net and fusion head with the detector
/// frozen: noise MSE plus `lambda` times the cross-entropy of the classifier
/// fed the clamped one-step estimate `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn train_single_stage<S: Scalar>(
    model: &Model,
    mut params: ParamSet<S>,
    data: &TrainData<S>,
    sc: &StageConfig,
    sched: &NoiseSchedule,
    lambda: f64,
    config_hash: &str,
) -> Result<(ParamSet<S>, RunRecord)> {
    expect_stage(sc, StageId::SingleStage)?;
    data.check_size(model)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParam(format!("CE weight must be finite and non-negative, got {lambda}")));
    }
    let pyramids = detector_features(model, &params, &data.images, INFER_BATCH)?;
    model.warm_start_fusion(&mut params)?;
    let names = ["loss", "noise_mse", "ce"];
    let record = optimize(sc, data.len(), &mut params, &names, config_hash, |_, idx, step, p| {
        let x0 = to_diffusion_range(&gather(&data.maps, idx)?);
        let (ts, eps) = draw_training_noise::<S, _>(&mut child_rng(sc.seed, "diffusion-t", step), x0.shape(), sched);
        let xt = q_sample_batch(&x0, &ts, &eps, sched)?;
        let (conds, pcache) = model.projectors.forward(&gather_pyramid(&pyramids, idx)?, p)?;
        let (pred, ucache) = model.unet.forward(&xt, &as_f64(&ts), &conds, p)?;
        let (mse, g_mse) = mse_loss(&pred, &eps)?;

        let per = pred.len() / idx.len();
        let mut map = Tensor::zeros(pred.shape());
        // d map / d ε̂ per element: zero where the clamp is active.
        let mut dmap = Tensor::zeros(pred.shape());
        for (b, &t) in ts.iter().enumerate() {
            let ab = sched.alpha_bar(t)?;
            let (s1, inv) = ((1.0 - ab).sqrt(), 1.0 / ab.sqrt());
            for k in b * per..(b + 1) * per {
                let x0_hat = (xt.data()[k].as_f64() - s1 * pred.data()[k].as_f64()) * inv;
                let m = 0.5 * (x0_hat + 1.0);
                map.data_mut()[k] = S::lit(m.clamp(0.0, 1.0));
                dmap.data_mut()[k] = S::lit(if (0.0..=1.0).contains(&m) { -0.5 * s1 * inv } else { 0.0 });
            }
        }
        let (logits, fcache) = model.fusion.forward(&map, &gather_level(&pyramids, 3, idx)?, p)?;
        let (ce, g_logits) = softmax_cross_entropy(&logits, &data.one_hot(idx))?;
        let mut grads = ParamSet::new();
        let (g_map, _) = model.fusion.backward(&fcache, p, &g_logits, &mut grads)?;
        let lam = S::lit(lambda);
        let g_pred = g_mse.zip_map(&g_map.mul(&dmap)?, |a, b| a + lam * b)?;
        let (_, cond_grads) = model.unet.backward(&ucache, p, &g_pred, &mut grads)?;
        model.projectors.backward(&pcache, p, &cond_grads, &mut grads)?;
        let (mse, ce) = (mse.as_f64(), ce.as_f64());
        Ok((vec![mse + lambda * ce, mse, ce], grads))
    })?;
    Ok((params, record))
}
