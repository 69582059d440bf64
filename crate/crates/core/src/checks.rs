//! Self-check suites over the numerical core, each compared against an
//! independent reference computation.

use rand::Rng;

use crate::diffusion::{denoise_step, make_schedule, q_sample, standard_normal, ReverseRule};
use crate::dssim::{gt_map_for_sample, reflect, ssim_from_stats, ssim_map, DssimParams};
use crate::error::Result;
use crate::gradcheck::layer_suite;
use crate::metrics::{auc, ScoredSample};
use crate::rng::child_rng;
use crate::synth::Label;
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ROUNDTRIP_TOLERANCE: f64 = 1e-6;
pub const DSSIM_TOLERANCE: f64 = 1e-6;
pub const AUC_TOLERANCE: f64 = 1e-12;

/// Finite-difference check of every layer kind in 64-bit.
pub fn grad_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    Ok(layer_suite(trials, seed)?
        .into_iter()
        .map(|r| {
            let detail = format!("{} trials, max rel err {:.3e}", r.trials, r.max_rel_err);
            CheckResult::new(format!("grad/{}", r.kind), r.max_rel_err < GRAD_TOLERANCE, detail)
        })
        .collect())
}

/// Forward noising followed by the reverse step with the true noise returns
/// `x0` at every timestep; schedule endpoints and monotonicity.
pub fn roundtrip_checks(steps: usize, beta_start: f64, beta_end: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let s = make_schedule(steps, beta_start, beta_end)?;
    let mut worst = 0.0f64;
    for t in 1..=steps {
        let mut rng = child_rng(seed, "check/roundtrip", t as u64);
        let x0 = Tensor::<f64>::from_fn(&[2, 1, 8, 8], |_| rng.random_range(-1.0..=1.0));
        let eps: Tensor<f64> = standard_normal(&mut rng, &[2, 1, 8, 8]);
        let back = denoise_step(&q_sample(&x0, t, &eps, &s)?, t, &eps, &s, ReverseRule::X0Rescale, None)?;
        worst = worst.max(back.max_abs_diff(&x0)?);
    }
    let endpoints = s.beta(1)? == beta_start && s.beta(steps)? == beta_end;
    let mut decreasing = true;
    for t in 2..=steps {
        decreasing &= s.alpha_bar(t)? < s.alpha_bar(t - 1)?;
    }
    Ok(vec![
        CheckResult::new("roundtrip/identity", worst <= ROUNDTRIP_TOLERANCE, format!("t in [1,{steps}], max abs err {worst:.3e}")),
        CheckResult::new("roundtrip/endpoints", endpoints, format!("beta_1 = {}, beta_{steps} = {}", s.beta(1)?, s.beta(steps)?)),
        CheckResult::new("roundtrip/alpha-bar-decreasing", decreasing, format!("{steps} steps")),
    ])
}

/// SSIM by direct evaluation of every window, with reflected borders.
pub fn naive_ssim_map(x: &Tensor<f64>, y: &Tensor<f64>, p: &DssimParams) -> Tensor<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let r = p.radius() as isize;
    Tensor::from_fn(&[h, w], |k| {
        let (i, j) = ((k / w) as isize, (k % w) as isize);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let (a, b) = (reflect(i + dy, h), reflect(j + dx, w));
                xs.push(x.data()[a * w + b]);
                ys.push(y.data()[a * w + b]);
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let cxy = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
        ssim_from_stats(mx, my, vx, vy, cxy, p)
    })
}

/// AUC by counting every fake/real pair, ties worth one half.
pub fn pair_count_auc(s: &[ScoredSample]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in s.iter().filter(|x| x.label == Label::Fake) {
        for n in s.iter().filter(|x| x.label == Label::Real) {
            den += 1.0;
            num += if p.score > n.score {
                1.0
            } else if p.score == n.score {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

/// Fast SSIM against the window loop, identity and locality of DSSIM maps.
pub fn dssim_checks(pairs: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let p = DssimParams::default();
    let mut worst = 0.0f64;
    let mut identical_zero = true;
    for i in 0..pairs {
        let mut rng = child_rng(seed, "check/dssim", i as u64);
        let x = Tensor::<f64>::from_fn(&[16, 16], |_| rng.random());
        let y = Tensor::<f64>::from_fn(&[16, 16], |_| rng.random());
        worst = worst.max(ssim_map(&x, &y, &p)?.max_abs_diff(&naive_ssim_map(&x, &y, &p))?);
        let rgb = Tensor::<f64>::from_fn(&[3, 16, 16], |_| rng.random());
        identical_zero &= gt_map_for_sample(&rgb, Some(&rgb), &p)?.values.data().iter().all(|&v| v == 0.0);
    }
    let (local, outside_max, inside_min) = patch_locality(seed, &p)?;
    Ok(vec![
        CheckResult::new("dssim/window-oracle", worst <= DSSIM_TOLERANCE, format!("{pairs} pairs 16x16, max abs err {worst:.3e}")),
        CheckResult::new("dssim/identical-zero", identical_zero, format!("{pairs} identical pairs")),
        CheckResult::new("dssim/locality", local, format!("max outside {outside_max:.3e}, min inside {inside_min:.3e}")),
    ])
}

/// A brightened square patch gives a nonzero map exactly on the patch dilated
/// by the window radius and zero elsewhere.
fn patch_locality(seed: u64, p: &DssimParams) -> Result<(bool, f64, f64)> {
    let mut ok = true;
    let (mut outside_max, mut inside_min) = (0.0f64, f64::INFINITY);
    let r = p.radius();
    for trial in 0..8u64 {
        let mut rng = child_rng(seed, "check/locality", trial);
        let real = Tensor::<f64>::from_fn(&[3, 32, 32], |_| rng.random_range(0.1..0.7));
        let (y0, x0, side) = (rng.random_range(0..24), rng.random_range(0..24), rng.random_range(2..9));
        let mut fake = real.clone();
        for c in 0..3 {
            for y in y0..(y0 + side).min(32) {
                for x in x0..(x0 + side).min(32) {
                    fake.data_mut()[(c * 32 + y) * 32 + x] += 0.2;
                }
            }
        }
        let m = gt_map_for_sample(&real, Some(&fake), p)?.values;
        for y in 0..32usize {
            for x in 0..32usize {
                let inside = y + r >= y0 && y < y0 + side + r && x + r >= x0 && x < x0 + side + r;
                let v = m.data()[y * 32 + x];
                if inside {
                    inside_min = inside_min.min(v);
                    ok &= v > 0.0;
                } else {
                    outside_max = outside_max.max(v);
                    ok &= v == 0.0;
                }
            }
        }
    }
    Ok((ok, outside_max, inside_min))
}

/// Rank-based AUC against pair counting on random score sets with ties, and
/// invariance under a strictly increasing transform.
pub fn auc_checks(sets: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut worst = 0.0f64;
    let mut invariant = true;
    for i in 0..sets {
        let mut rng = child_rng(seed, "check/auc", i as u64);
        let n = rng.random_range(2..80);
        let levels = rng.random_range(2..30);
        let mut s: Vec<ScoredSample> = (0..n)
            .map(|id| ScoredSample {
                id,
                group_id: id,
                label: if rng.random_bool(0.5) { Label::Fake } else { Label::Real },
                score: rng.random_range(0..levels) as f64 / levels as f64,
            })
            .collect();
        s[0].label = Label::Fake;
        s[1].label = Label::Real;
        let a = auc(&s, false)?;
        worst = worst.max((a - pair_count_auc(&s)).abs());
        let t: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { score: (3.0 * x.score).exp() - 0.5, ..x.clone() }).collect();
        invariant &= auc(&t, false)? == a;
    }
    Ok(vec![
        CheckResult::new("auc/pair-counting", worst <= AUC_TOLERANCE, format!("{sets} sets, max abs err {worst:.3e}")),
        CheckResult::new("auc/monotone-invariance", invariant, format!("{sets} sets")),
    ])
}
