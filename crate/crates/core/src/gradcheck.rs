//! Central finite-difference gradient checks, run in `f64`.
//!
//! The probe loss is `L = Σ y ⊙ R` for a fixed random tensor `R`, so the
//! upstream gradient handed to `backward` is exactly `R`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{Layer, LayerSpec};
use crate::params::ParamSet;
use crate::rng::child_rng;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Magnitude floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between two gradient tensors.
pub fn max_rel_err(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic.data().iter().zip(numeric.data()).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Central differences of a scalar function with respect to every element of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> Result<f64>) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    Ok(g)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max relative error of `layer.backward` against finite differences for input and parameters.
pub fn check_layer(layer: &Layer, x: &Tensor<f64>, params: &ParamSet<f64>, probe: &Tensor<f64>) -> Result<f64> {
    let analytic = layer.backward(x, params, probe)?;
    let num_x = numeric_grad(x, |xp| Ok(dot(&layer.forward(xp, params)?, probe)))?;
    let mut worst = max_rel_err(&analytic.input, &num_x);
    for (name, g) in &analytic.params {
        let p0 = params.get(name)?.clone();
        let num = numeric_grad(&p0, |pp| {
            let mut ps = params.clone();
            ps.insert(name.clone(), pp.clone());
            Ok(dot(&layer.forward(x, &ps)?, probe))
        })?;
        worst = worst.max(max_rel_err(g, &num));
    }
    Ok(worst)
}

pub const LAYER_KINDS: [&str; 13] = [
    "conv2d",
    "transposed-conv2d",
    "linear",
    "group-normalization",
    "silu",
    "gelu",
    "sigmoid",
    "average-pool",
    "global-average-pool",
    "nearest-upsample",
    "bilinear-resize",
    "softmax-cross-entropy",
    "mse",
];

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// A randomized small instance of the given layer kind: `(layer, input, params)`.
pub fn random_case(kind: &str, rng: &mut ChaCha8Rng) -> (Layer, Tensor<f64>, ParamSet<f64>) {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(2..=5);
    let w = rng.random_range(2..=5);
    let spec = match kind {
        "conv2d" => LayerSpec::conv(c, rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(0..=1)),
        "transposed-conv2d" => {
            let kernel = rng.random_range(1..=3);
            LayerSpec::ConvTranspose2d {
                in_ch: c,
                out_ch: rng.random_range(1..=3),
                kernel,
                stride: rng.random_range(1..=2),
                padding: rng.random_range(0..kernel.min(2)),
            }
        }
        "linear" => LayerSpec::Linear { in_features: rng.random_range(1..=6), out_features: rng.random_range(1..=4) },
        "group-normalization" => {
            let groups = rng.random_range(1..=2);
            LayerSpec::GroupNorm { groups, channels: groups * rng.random_range(1..=2) }
        }
        "silu" => LayerSpec::Silu,
        "gelu" => LayerSpec::Gelu,
        "sigmoid" => LayerSpec::Sigmoid,
        "average-pool" => LayerSpec::AvgPool { kernel: rng.random_range(1..=2) },
        "global-average-pool" => LayerSpec::GlobalAvgPool,
        "nearest-upsample" => LayerSpec::NearestUpsample { scale: rng.random_range(1..=3) },
        "bilinear-resize" => LayerSpec::BilinearResize { out_h: rng.random_range(1..=7), out_w: rng.random_range(1..=7) },
        "softmax-cross-entropy" => LayerSpec::SoftmaxCrossEntropy,
        "mse" => LayerSpec::Mse,
        other => panic!("unknown layer kind {other}"),
    };
    let layer = Layer::new("probe", spec.clone());
    let shape: Vec<usize> = match spec {
        LayerSpec::Conv2d { in_ch, kernel, padding, .. } => {
            vec![n, in_ch, h.max(kernel.saturating_sub(2 * padding)), w.max(kernel.saturating_sub(2 * padding))]
        }
        LayerSpec::Linear { in_features, .. } => vec![n, in_features],
        LayerSpec::GroupNorm { channels, .. } => vec![n, channels, h, w],
        LayerSpec::AvgPool { kernel } => vec![n, c, kernel * rng.random_range(1..=3), kernel * rng.random_range(1..=3)],
        LayerSpec::SoftmaxCrossEntropy => vec![n, rng.random_range(2..=4)],
        LayerSpec::Mse => vec![n, c, h],
        _ => vec![n, c, h, w],
    };
    let x = normal_tensor(rng, &shape, 1.0);
    let mut params = ParamSet::new();
    layer.init_params(rng, &mut params);
    // Perturb initial values so biases and norm affines are exercised off their defaults.
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    match layer.spec {
        LayerSpec::SoftmaxCrossEntropy => {
            let (rows, k) = (shape[0], shape[1]);
            let mut t = Tensor::zeros(&[rows, k]);
            for r in 0..rows {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                for (j, v) in raw.iter().enumerate() {
                    t.data_mut()[r * k + j] = v / z;
                }
            }
            params.insert(layer.param_name("target"), t);
        }
        LayerSpec::Mse => params.insert(layer.param_name("target"), normal_tensor(rng, &shape, 1.0)),
        _ => {}
    }
    (layer, x, params)
}

#[derive(Clone, Debug)]
pub struct KindReport {
    pub kind: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
}

/// Randomized finite-difference suite over every layer kind.
pub fn layer_suite(trials: usize, seed: u64) -> Result<Vec<KindReport>> {
    LAYER_KINDS
        .iter()
        .map(|&kind| {
            let mut rng = child_rng(seed, &format!("gradcheck/{kind}"), 0);
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let (layer, x, params) = random_case(kind, &mut rng);
                let out_shape = layer.spec.output_shape(x.shape())?;
                let probe = normal_tensor(&mut rng, &out_shape, 1.0);
                worst = worst.max(check_layer(&layer, &x, &params, &probe)?);
            }
            Ok(KindReport { kind, trials, max_rel_err: worst })
        })
        .collect()
}
