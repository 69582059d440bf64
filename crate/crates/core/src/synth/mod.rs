//! Aligned real/fake pair synthesis.
//!
//! A fake is `real + mask ⊙ (transform(real) − real)`: where the mask is
//! exactly zero the fake is bit-identical to the real image, which keeps the
//! ground-truth DSSIM map exact and local.

mod dataset;
mod scene;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::dssim::reflect;
use crate::error::{shape_err, Error, Result};
use crate::imageio::quantize;
use crate::rng::child_rng;
use crate::tensor::Tensor;

pub use dataset::{
    build_dataset, generate_samples, load_map, load_samples, read_manifest, save_map, write_manifest, DataConfig, DatasetFiles,
    Label, ManifestRow, Sample, MANIFEST_HEADER, MAP_TENSOR, TEST_MANIFEST, TRAIN_MANIFEST,
};
pub use scene::{generate_base, generate_frame, make_mask, support_fraction, MASK_MAX_SUPPORT, MASK_MIN_SUPPORT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ManipulationKind {
    PhotometricShift,
    LocalBlur,
    PatchSwap,
    WarpBlend,
}

impl ManipulationKind {
    pub const ALL: [ManipulationKind; 4] =
        [Self::PhotometricShift, Self::LocalBlur, Self::PatchSwap, Self::WarpBlend];

    pub fn name(self) -> &'static str {
        match self {
            Self::PhotometricShift => "photometric-shift",
            Self::LocalBlur => "local-blur",
            Self::PatchSwap => "patch-swap",
            Self::WarpBlend => "warp-blend",
        }
    }
}

impl fmt::Display for ManipulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ManipulationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::InvalidParam(format!("unknown manipulation kind `{s}`")))
    }
}

/// Parameter ranges each manipulation kind samples from.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipulationRanges {
    /// Magnitude range of the global brightness offset (sign is random).
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    /// Max absolute per-channel offset.
    pub rgb_shift: f64,
    /// Box-blur radius range in pixels (inclusive), applied twice.
    pub blur_radius: (usize, usize),
    /// Magnitude range of the patch-swap source offset in pixels.
    pub swap_offset: (usize, usize),
    /// Warp displacement amplitude range in pixels.
    pub warp_amplitude: (f64, f64),
    pub warp_frequency: (f64, f64),
}

impl Default for ManipulationRanges {
    fn default() -> Self {
        Self {
            brightness: (0.15, 0.35),
            contrast: (0.7, 1.3),
            rgb_shift: 0.08,
            blur_radius: (2, 4),
            swap_offset: (4, 12),
            warp_amplitude: (2.0, 4.0),
            warp_frequency: (1.0, 3.0),
        }
    }
}

/// A manipulation with concrete parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Manipulation {
    Photometric { brightness: f64, contrast: f64, rgb: [f64; 3] },
    Blur { radius: usize },
    PatchSwap { dx: isize, dy: isize },
    Warp { amplitude: f64, frequency: f64, phase: [f64; 2] },
}

fn signed<R: Rng>(rng: &mut R, v: f64) -> f64 {
    if rng.random_bool(0.5) {
        v
    } else {
        -v
    }
}

impl Manipulation {
    pub fn sample<R: Rng>(kind: ManipulationKind, r: &ManipulationRanges, rng: &mut R) -> Self {
        match kind {
            ManipulationKind::PhotometricShift => {
                let b = rng.random_range(r.brightness.0..=r.brightness.1);
                Manipulation::Photometric {
                    brightness: signed(rng, b),
                    contrast: rng.random_range(r.contrast.0..=r.contrast.1),
                    rgb: [0; 3].map(|_| rng.random_range(-r.rgb_shift..=r.rgb_shift)),
                }
            }
            ManipulationKind::LocalBlur => {
                Manipulation::Blur { radius: rng.random_range(r.blur_radius.0..=r.blur_radius.1) }
            }
            ManipulationKind::PatchSwap => {
                let mut off = || {
                    let v = rng.random_range(r.swap_offset.0..=r.swap_offset.1) as f64;
                    signed(rng, v) as isize
                };
                Manipulation::PatchSwap { dx: off(), dy: off() }
            }
            ManipulationKind::WarpBlend => Manipulation::Warp {
                amplitude: rng.random_range(r.warp_amplitude.0..=r.warp_amplitude.1),
                frequency: rng.random_range(r.warp_frequency.0..=r.warp_frequency.1),
                phase: [0; 2].map(|_| rng.random_range(0.0..std::f64::consts::TAU)),
            },
        }
    }

    /// Parameters that leave the image unchanged.
    pub fn identity(kind: ManipulationKind) -> Self {
        match kind {
            ManipulationKind::PhotometricShift => Manipulation::Photometric { brightness: 0.0, contrast: 1.0, rgb: [0.0; 3] },
            ManipulationKind::LocalBlur => Manipulation::Blur { radius: 0 },
            ManipulationKind::PatchSwap => Manipulation::PatchSwap { dx: 0, dy: 0 },
            ManipulationKind::WarpBlend => Manipulation::Warp { amplitude: 0.0, frequency: 1.0, phase: [0.0; 2] },
        }
    }

    pub fn kind(&self) -> ManipulationKind {
        match self {
            Manipulation::Photometric { .. } => ManipulationKind::PhotometricShift,
            Manipulation::Blur { .. } => ManipulationKind::LocalBlur,
            Manipulation::PatchSwap { .. } => ManipulationKind::PatchSwap,
            Manipulation::Warp { .. } => ManipulationKind::WarpBlend,
        }
    }

    /// Transform the whole `3×H×W` image.
    pub fn transform(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w) = match *img.shape() {
            [3, h, w] => (h, w),
            _ => return Err(shape_err!("expected 3×H×W image, got {:?}", img.shape())),
        };
        let plane = h * w;
        let d = img.data();
        let out = match *self {
            Manipulation::Photometric { brightness, contrast, rgb } => {
                let mut out = img.clone();
                for (c, &shift) in rgb.iter().enumerate() {
                    let ch = &d[c * plane..(c + 1) * plane];
                    let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
                    for (o, &v) in out.data_mut()[c * plane..(c + 1) * plane].iter_mut().zip(ch) {
                        let v = v as f64;
                        *o = (v + (contrast - 1.0) * (v - mean) + brightness + shift).clamp(0.0, 1.0) as f32;
                    }
                }
                out
            }
            Manipulation::Blur { radius } => {
                let mut out = img.clone();
                for _ in 0..2 {
                    out = box_blur(&out, radius, h, w);
                }
                out
            }
            Manipulation::PatchSwap { dx, dy } => Tensor::from_fn(img.shape(), |k| {
                let (c, y, x) = (k / plane, (k % plane) / w, k % w);
                let sy = (y as isize + dy).rem_euclid(h as isize) as usize;
                let sx = (x as isize + dx).rem_euclid(w as isize) as usize;
                d[c * plane + sy * w + sx]
            }),
            Manipulation::Warp { amplitude, frequency, phase } => Tensor::from_fn(img.shape(), |k| {
                let (c, y, x) = (k / plane, (k % plane) / w, k % w);
                let tau = std::f64::consts::TAU;
                let oy = amplitude * (tau * frequency * x as f64 / w as f64 + phase[0]).sin();
                let ox = amplitude * (tau * frequency * y as f64 / h as f64 + phase[1]).cos();
                sample_bilinear(&d[c * plane..(c + 1) * plane], h, w, y as f64 + oy, x as f64 + ox)
            }),
        };
        Ok(out)
    }
}

fn box_blur(img: &Tensor<f32>, r: usize, h: usize, w: usize) -> Tensor<f32> {
    if r == 0 {
        return img.clone();
    }
    let plane = h * w;
    let d = img.data();
    let ri = r as isize;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    Tensor::from_fn(img.shape(), |k| {
        let (c, y, x) = (k / plane, (k % plane) / w, k % w);
        let mut acc = 0.0f64;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                let (sy, sx) = (reflect(y as isize + dy, h), reflect(x as isize + dx, w));
                acc += d[c * plane + sy * w + sx] as f64;
            }
        }
        (acc / n) as f32
    })
}

fn sample_bilinear(ch: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |yy: f64, xx: f64| ch[reflect(yy as isize, h) * w + reflect(xx as isize, w)];
    at(y0, x0) * (1.0 - fy) * (1.0 - fx)
        + at(y0, x0 + 1.0) * (1.0 - fy) * fx
        + at(y0 + 1.0, x0) * fy * (1.0 - fx)
        + at(y0 + 1.0, x0 + 1.0) * fy * fx
}

/// Blend `manip(real)` into `real` through `mask`, snapped to the 8-bit grid.
pub fn apply_manipulation(real: &Tensor<f32>, manip: &Manipulation, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = match *real.shape() {
        [3, h, w] => (h, w),
        _ => return Err(shape_err!("expected 3×H×W image, got {:?}", real.shape())),
    };
    if mask.shape() != [h, w] {
        return Err(shape_err!("mask {:?} does not match image {h}×{w}", mask.shape()));
    }
    let t = manip.transform(real)?;
    let plane = h * w;
    let blended = Tensor::from_fn(real.shape(), |k| {
        let r = real.data()[k];
        r + mask.data()[k % plane] * (t.data()[k] - r)
    });
    Ok(quantize(&blended))
}

/// Forge `real` with a manipulation of `kind` whose parameters are drawn from `seed`.
pub fn forge(
    real: &Tensor<f32>,
    kind: ManipulationKind,
    mask: &Tensor<f32>,
    seed: u64,
    ranges: &ManipulationRanges,
) -> Result<Tensor<f32>> {
    let mut rng = child_rng(seed, "forge", 0);
    apply_manipulation(real, &Manipulation::sample(kind, ranges, &mut rng), mask)
}
