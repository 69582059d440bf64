//! Sliding-window SSIM and DSSIM maps.
//!
//! Statistics use a uniform square window centred on each pixel, with
//! reflect padding (mirror without repeating the border pixel) so the map has
//! the input's size. Each window's sums are accumulated from its own pixels
//! only, in a fixed order: two windows with identical contents give
//! bit-identical statistics, so untouched regions score DSSIM exactly 0.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DssimParams {
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for DssimParams {
    /// 7×7 window, `C1 = (0.01·L)²`, `C2 = (0.03·L)²` for `L = 1`.
    fn default() -> Self {
        Self { window: 7, c1: 0.01f64.powi(2), c2: 0.03f64.powi(2) }
    }
}

impl DssimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidParam(format!("window must be odd and >= 3, got {}", self.window)));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidParam("C1 and C2 must be positive".into()));
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.window / 2
    }
}

/// Normalized per-pixel dissimilarity in `[0, 1]`, single channel `H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct DssimMap<S> {
    pub values: Tensor<S>,
    pub source: String,
}

impl<S: Scalar> DssimMap<S> {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { values: Tensor::zeros(&[h, w]), source: String::new() }
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = source.into();
        self
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn dims2<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(shape_err!("expected H×W grayscale image, got {:?}", t.shape())),
    }
}

/// SSIM from window statistics.
pub fn ssim_from_stats(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, p: &DssimParams) -> f64 {
    ((2.0 * mx * my + p.c1) * (2.0 * cxy + p.c2)) / ((mx * mx + my * my + p.c1) * (vx + vy + p.c2))
}

/// Per-pixel SSIM between two grayscale images in `[0, 1]`.
pub fn ssim_map<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, p: &DssimParams) -> Result<Tensor<S>> {
    p.validate()?;
    let (h, w) = dims2(x)?;
    if x.shape() != y.shape() {
        return Err(shape_err!("ssim inputs {:?} vs {:?}", x.shape(), y.shape()));
    }
    let r = p.radius();
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    // Padded f64 planes: x, y, x², y², xy.
    let mut planes = vec![vec![0.0f64; ph * pw]; 5];
    for py in 0..ph {
        let sy = reflect(py as isize - r as isize, h);
        for px in 0..pw {
            let sx = reflect(px as isize - r as isize, w);
            let a = x.data()[sy * w + sx].as_f64();
            let b = y.data()[sy * w + sx].as_f64();
            let k = py * pw + px;
            planes[0][k] = a;
            planes[1][k] = b;
            planes[2][k] = a * a;
            planes[3][k] = b * b;
            planes[4][k] = a * b;
        }
    }
    let win = p.window;
    let n = (win * win) as f64;
    // Separable window sums: horizontal over `win`, then vertical over `win`,
    // each evaluated from scratch so only in-window samples contribute.
    let mut sums = vec![vec![0.0f64; h * w]; 5];
    let mut rows = vec![0.0f64; ph * w];
    for (plane, out) in planes.iter().zip(sums.iter_mut()) {
        for py in 0..ph {
            for ox in 0..w {
                rows[py * w + ox] = plane[py * pw + ox..py * pw + ox + win].iter().sum();
            }
        }
        for oy in 0..h {
            for ox in 0..w {
                out[oy * w + ox] = (0..win).map(|d| rows[(oy + d) * w + ox]).sum();
            }
        }
    }
    let data = (0..h * w)
        .map(|k| {
            let mx = sums[0][k] / n;
            let my = sums[1][k] / n;
            let vx = sums[2][k] / n - mx * mx;
            let vy = sums[3][k] / n - my * my;
            let cxy = sums[4][k] / n - mx * my;
            S::lit(ssim_from_stats(mx, my, vx, vy, cxy, p))
        })
        .collect();
    Tensor::new(vec![h, w], data)
}

/// `1 − SSIM` before normalization, range `[0, 2]`.
pub fn raw_dssim<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, p: &DssimParams) -> Result<Tensor<S>> {
    Ok(ssim_map(x, y, p)?.map(|s| S::one() - s))
}

/// DSSIM map normalized into `[0, 1]` by halving and clamping.
pub fn dssim_map<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>, p: &DssimParams) -> Result<DssimMap<S>> {
    let half = S::lit(0.5);
    let values = ssim_map(x, y, p)?.map(|s| ((S::one() - s) * half).max(S::zero()).min(S::one()));
    Ok(DssimMap { values, source: String::new() })
}

/// Luminance of a `3×H×W` colour image.
pub fn luminance<S: Scalar>(img: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        [1, h, w] => return img.clone().reshape(&[h, w]),
        _ => return Err(shape_err!("expected 3×H×W image, got {:?}", img.shape())),
    };
    let plane = h * w;
    let [wr, wg, wb] = LUMA_WEIGHTS.map(S::lit);
    let d = img.data();
    Tensor::new(vec![h, w], (0..plane).map(|i| wr * d[i] + wg * d[plane + i] + wb * d[2 * plane + i]).collect())
}

/// Ground-truth map of a sample: DSSIM of luminances for fakes, all zeros for reals.
pub fn gt_map_for_sample<S: Scalar>(real: &Tensor<S>, fake: Option<&Tensor<S>>, p: &DssimParams) -> Result<DssimMap<S>> {
    p.validate()?;
    let lr = luminance(real)?;
    let (h, w) = dims2(&lr)?;
    match fake {
        None => Ok(DssimMap::zeros(h, w)),
        Some(f) => {
            if f.shape() != real.shape() {
                return Err(shape_err!("misaligned pair {:?} vs {:?}", real.shape(), f.shape()));
            }
            dssim_map(&lr, &luminance(f)?, p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::naive_ssim_map;
    use crate::rng::child_rng;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = child_rng(seed, "dssim-test", 0);
        Tensor::from_fn(&[h, w], |_| rng.random::<f64>())
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-3, 5), 3);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(7, 5), 1);
        assert_eq!(reflect(2, 5), 2);
    }

    #[test]
    fn identical_images_give_unit_ssim_and_zero_dssim() {
        let x = random_image(1, 9, 11);
        let s = ssim_map(&x, &x, &DssimParams::default()).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
        let d = dssim_map(&x, &x, &DssimParams::default()).unwrap();
        assert!(d.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_offset_reduces_to_luminance_term() {
        let p = DssimParams::default();
        let x = Tensor::full(&[10, 10], 0.5);
        let y = Tensor::full(&[10, 10], 0.6);
        let s = ssim_map(&x, &y, &p).unwrap();
        let want = (2.0 * 0.5 * 0.6 + p.c1) / (0.25 + 0.36 + p.c1);
        let oracle = naive_ssim_map(&x, &y, &p);
        for (&v, &o) in s.data().iter().zip(oracle.data()) {
            assert!((v - want).abs() < 1e-12);
            assert!((v - o).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_window_loop() {
        let p = DssimParams::default();
        for seed in 0..20 {
            let x = random_image(2 * seed, 16, 16);
            let y = random_image(2 * seed + 1, 16, 16);
            let diff = ssim_map(&x, &y, &p).unwrap().max_abs_diff(&naive_ssim_map(&x, &y, &p)).unwrap();
            assert!(diff < 1e-6, "seed {seed}: {diff}");
        }
    }

    #[test]
    fn symmetric_and_bounded() {
        let p = DssimParams::default();
        let x = random_image(5, 12, 12);
        let y = random_image(6, 12, 12);
        let a = ssim_map(&x, &y, &p).unwrap();
        let b = ssim_map(&y, &x, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let d = dssim_map(&x, &y, &p).unwrap();
        let raw = raw_dssim(&x, &y, &p).unwrap();
        for (&dv, &rv) in d.values.data().iter().zip(raw.data()) {
            assert!((0.0..=1.0).contains(&dv));
            assert!((dv - rv / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn inverted_structure_maps_to_one() {
        let p = DssimParams::default();
        // SSIM = -1 ⇒ normalized DSSIM = 1.
        assert_eq!(((1.0f64 - (-1.0)) * 0.5).min(1.0), 1.0);
        // Zero-mean anti-correlated windows approach SSIM = -1 as variance dominates C2.
        let s = ssim_from_stats(0.0, 0.0, 1e6, 1e6, -1e6, &p);
        assert!((s + 1.0).abs() < 1e-6);
    }

    #[test]
    fn real_sample_gets_black_map() {
        let real = Tensor::from_fn(&[3, 8, 8], |i| (i % 13) as f64 / 13.0);
        let m = gt_map_for_sample(&real, None, &DssimParams::default()).unwrap();
        assert_eq!(m.values.shape(), &[8, 8]);
        assert!(m.values.data().iter().all(|&v| v == 0.0));
        let same = gt_map_for_sample(&real, Some(&real), &DssimParams::default()).unwrap();
        assert!(same.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_shift_is_local() {
        let p = DssimParams::default();
        let mut rng = child_rng(9, "patch", 0);
        let real = Tensor::from_fn(&[3, 32, 32], |_| rng.random_range(0.1..0.7));
        let mut fake = real.clone();
        let (y0, x0) = (12usize, 10usize);
        for c in 0..3 {
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    fake.data_mut()[(c * 32 + y) * 32 + x] += 0.2;
                }
            }
        }
        let m = gt_map_for_sample(&real, Some(&fake), &p).unwrap();
        let r = p.radius();
        for y in 0..32 {
            for x in 0..32 {
                let inside = y + r >= y0 && y < y0 + 8 + r && x + r >= x0 && x < x0 + 8 + r;
                let v = m.values.data()[y * 32 + x];
                if inside {
                    assert!(v > 0.0, "({y},{x}) should be nonzero");
                } else {
                    assert_eq!(v, 0.0, "({y},{x}) should be exactly zero");
                }
            }
        }
    }

    #[test]
    fn rejects_invalid_inputs() {
        let x = Tensor::<f64>::zeros(&[8, 8]);
        assert!(ssim_map(&x, &Tensor::zeros(&[8, 9]), &DssimParams::default()).is_err());
        assert!(ssim_map(&x, &x, &DssimParams { window: 4, ..Default::default() }).is_err());
        assert!(ssim_map(&x, &x, &DssimParams { c1: 0.0, ..Default::default() }).is_err());
        let real = Tensor::<f64>::zeros(&[3, 8, 8]);
        assert!(gt_map_for_sample(&real, Some(&Tensor::zeros(&[3, 8, 7])), &DssimParams::default()).is_err());
    }
}
