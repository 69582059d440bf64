//! Procedural base images and blob masks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::imageio::quantize;
use crate::rng::child_rng;
use crate::tensor::Tensor;

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn rand_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

/// One frame of a scene: the layout (gradients, ellipses, stripes) comes from
/// `scene_seed`, per-frame jitter and texture noise from `frame_seed`.
pub fn generate_frame(scene_seed: u64, frame_seed: u64, size: usize) -> Tensor<f32> {
    let mut rng = child_rng(scene_seed, "scene", 0);
    let mut frng = child_rng(frame_seed, "frame", 0);
    let s = size as f64;
    let plane = size * size;
    let mut img = vec![0.0f64; 3 * plane];

    let (c0, c1) = (rand_color(&mut rng), rand_color(&mut rng));
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    let wave_f: f64 = rng.random_range(0.5..2.0);
    let wave_a: f64 = rng.random_range(0.02..0.08);
    let wave_phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            let t = (0.5 + u * gx + v * gy).clamp(0.0, 1.0);
            let wave = wave_a * (std::f64::consts::TAU * wave_f * (u - v) + wave_phi).sin();
            for c in 0..3 {
                img[c * plane + y * size + x] = c0[c] * (1.0 - t) + c1[c] * t + wave;
            }
        }
    }

    let n_ellipses = rng.random_range(3..=6);
    for _ in 0..n_ellipses {
        let col = rand_color(&mut rng);
        let (cx, cy) = (rng.random_range(0.1..0.9) * s, rng.random_range(0.1..0.9) * s);
        let (rx, ry) = (rng.random_range(0.08..0.3) * s, rng.random_range(0.08..0.3) * s);
        let rot: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let alpha: f64 = rng.random_range(0.5..0.95);
        let (cr, sr) = (rot.cos(), rot.sin());
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let (u, v) = ((dx * cr + dy * sr) / rx, (-dx * sr + dy * cr) / ry);
                let d = (u * u + v * v).sqrt();
                let a = alpha * smoothstep((1.0 - d) * rx.min(ry) / 1.5);
                for c in 0..3 {
                    let k = c * plane + y * size + x;
                    img[k] = img[k] * (1.0 - a) + col[c] * a;
                }
            }
        }
    }

    let stripe_f: f64 = rng.random_range(3.0..8.0);
    let stripe_a: f64 = rng.random_range(0.01..0.05);
    let stripe_dir: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let noise_sigma: f64 = rng.random_range(0.01..0.04);
    let gain: f64 = 1.0 + frng.random_range(-0.04..0.04);
    let shift_x: f64 = frng.random_range(-0.5..0.5);
    for y in 0..size {
        for x in 0..size {
            let p = ((x as f64 + shift_x) * stripe_dir.cos() + y as f64 * stripe_dir.sin()) / s;
            let stripe = stripe_a * (std::f64::consts::TAU * stripe_f * p).sin();
            for c in 0..3 {
                let k = c * plane + y * size + x;
                let n: f64 = frng.sample(StandardNormal);
                img[k] = ((img[k] + stripe) * gain + noise_sigma * n).clamp(0.0, 1.0);
            }
        }
    }
    quantize(&Tensor::new(vec![3, size, size], img.into_iter().map(|v| v as f32).collect()).expect("sized"))
}

/// Structured RGB image in `[0, 1]` on the 8-bit grid, deterministic in `seed`.
pub fn generate_base(seed: u64, size: usize) -> Tensor<f32> {
    generate_frame(seed, seed, size)
}

pub const MASK_MIN_SUPPORT: f64 = 0.05;
pub const MASK_MAX_SUPPORT: f64 = 0.40;

fn blob_mask<R: Rng>(rng: &mut R, h: usize, w: usize, scale: f64) -> Vec<f64> {
    let (hs, ws) = (h as f64, w as f64);
    let (cx, cy) = (rng.random_range(0.3..0.7) * ws, rng.random_range(0.3..0.7) * hs);
    let rx = rng.random_range(0.12..0.3) * ws * scale;
    let ry = rng.random_range(0.12..0.3) * hs * scale;
    let rot: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let feather: f64 = rng.random_range(2.0..3.5);
    let harmonics: Vec<(f64, f64, f64)> = (2..=3)
        .map(|k| (k as f64, rng.random_range(0.0..0.12), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let (cr, sr) = (rot.cos(), rot.sin());
    let mut m = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = ((dx * cr + dy * sr) / rx, (-dx * sr + dy * cr) / ry);
            let ang = v.atan2(u);
            let wobble: f64 = harmonics.iter().map(|&(k, a, p)| a * (k * ang + p).sin()).sum();
            let d = (u * u + v * v).sqrt() / (1.0 + wobble);
            // approximate pixel distance inside the boundary
            let inside = (1.0 - d) * rx.min(ry);
            m[y * w + x] = smoothstep(inside / feather + 0.5);
        }
    }
    m
}

/// Feathered blob mask in `[0, 1]` whose support covers 5–40% of the image.
pub fn make_mask(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = child_rng(seed, "mask", 0);
    let mut scale = 1.0;
    let mut best: Option<(f64, Tensor<f32>)> = None;
    for _ in 0..64 {
        let m = blob_mask(&mut rng, h, w, scale);
        let t = Tensor::new(vec![h, w], m.into_iter().map(|v| v as f32).collect()).expect("sized");
        let frac = support_fraction(&t);
        if (MASK_MIN_SUPPORT..=MASK_MAX_SUPPORT).contains(&frac) {
            return t;
        }
        let miss = (frac - MASK_MIN_SUPPORT).abs().min((frac - MASK_MAX_SUPPORT).abs());
        if best.as_ref().is_none_or(|(b, _)| miss < *b) {
            best = Some((miss, t));
        }
        scale *= if frac > MASK_MAX_SUPPORT { 0.85 } else { 1.15 };
    }
    // Only reachable for tiny images where the pixel grid cannot hit the band.
    best.expect("at least one attempt").1
}

pub fn support_fraction(mask: &Tensor<f32>) -> f64 {
    mask.data().iter().filter(|&&v| v > 0.0).count() as f64 / mask.len() as f64
}
