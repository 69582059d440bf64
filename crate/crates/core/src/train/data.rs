//! In-memory training tensors and batch assembly.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nets::Model;
use crate::params::ParamSet;
use crate::rng::child_rng;
use crate::scalar::Scalar;
use crate::synth::{Label, Sample};
use crate::tensor::Tensor;

/// Per-sample tensors, each with a leading batch axis of 1.
#[derive(Clone, Debug)]
pub struct TrainData<S> {
    pub ids: Vec<usize>,
    pub group_ids: Vec<usize>,
    pub labels: Vec<Label>,
    /// Classifier inputs, `1×3×H×W`.
    pub images: Vec<Tensor<S>>,
    /// GT maps in `[0, 1]`, `1×1×H×W`.
    pub maps: Vec<Tensor<S>>,
}

impl<S: Scalar> TrainData<S> {
    pub fn new(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParam("no samples".into()));
        }
        let mut d = Self { ids: vec![], group_ids: vec![], labels: vec![], images: vec![], maps: vec![] };
        for s in samples {
            let (h, w) = s.gt_map.dims2()?;
            d.ids.push(s.id);
            d.group_ids.push(s.group_id);
            d.labels.push(s.label);
            d.images.push(s.input().cast::<S>().unsqueeze0());
            d.maps.push(s.gt_map.cast::<S>().reshape(&[1, 1, h, w])?);
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Keep the samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &Vec<Tensor<S>>| idx.iter().map(|&i| v[i].clone()).collect();
        Self {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            group_ids: idx.iter().map(|&i| self.group_ids[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            images: pick(&self.images),
            maps: pick(&self.maps),
        }
    }

    pub fn one_hot(&self, idx: &[usize]) -> Tensor<S> {
        let mut t = Tensor::zeros(&[idx.len(), 2]);
        for (r, &i) in idx.iter().enumerate() {
            t.data_mut()[r * 2 + self.labels[i].index()] = S::one();
        }
        t
    }

    pub fn check_size(&self, model: &Model) -> Result<()> {
        let s = model.config.image_size;
        match self.images.first().map(|t| t.shape().to_vec()) {
            Some(shape) if shape == [1, 3, s, s] => Ok(()),
            other => Err(Error::InvalidParam(format!("model expects {s}×{s} images, data has {other:?}"))),
        }
    }
}

/// Stack the per-sample tensors at `idx` into one batch.
pub fn gather<S: Scalar>(items: &[Tensor<S>], idx: &[usize]) -> Result<Tensor<S>> {
    let picked: Vec<Tensor<S>> = idx.iter().map(|&i| items[i].clone()).collect();
    Tensor::stack(&picked)
}

/// Stack pyramid level `level` of the samples at `idx`.
pub fn gather_level<S: Scalar>(pyramids: &[Vec<Tensor<S>>], level: usize, idx: &[usize]) -> Result<Tensor<S>> {
    let picked: Vec<Tensor<S>> = idx.iter().map(|&i| pyramids[i][level].clone()).collect();
    Tensor::stack(&picked)
}

pub fn gather_pyramid<S: Scalar>(pyramids: &[Vec<Tensor<S>>], idx: &[usize]) -> Result<Vec<Tensor<S>>> {
    (0..4).map(|l| gather_level(pyramids, l, idx)).collect()
}

/// Split a batch tensor back into per-sample tensors with a leading axis of 1.
pub fn scatter<S: Scalar>(batch: &Tensor<S>) -> Result<Vec<Tensor<S>>> {
    (0..batch.shape()[0]).map(|i| batch.batch_item(i)).collect()
}

/// Index chunks of `n` in order.
pub fn sequential_batches(n: usize, batch: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Seed-determined shuffled batches for one epoch.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, stream: &str, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut child_rng(seed, stream, epoch as u64));
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Detector feature pyramid of every sample, computed in inference batches.
pub fn detector_features<S: Scalar>(model: &Model, params: &ParamSet<S>, images: &[Tensor<S>], batch: usize) -> Result<Vec<Vec<Tensor<S>>>> {
    let mut out: Vec<Vec<Tensor<S>>> = Vec::with_capacity(images.len());
    for idx in sequential_batches(images.len(), batch) {
        let x = gather(images, &idx)?;
        let levels = model.detector.infer(&x, params)?.pyramid;
        let per_level: Vec<Vec<Tensor<S>>> = levels.iter().map(scatter).collect::<Result<_>>()?;
        for j in 0..idx.len() {
            out.push(per_level.iter().map(|l| l[j].clone()).collect());
        }
    }
    Ok(out)
}
