//! DDPM noise schedule, forward noising, reverse updates and the sampling loop.
//!
//! Maps live in `[−1, 1]` inside this module (a linear rescale of the
//! `[0, 1]` DSSIM maps) so that the fully noised state matches the standard
//! normal prior.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::rng::child_rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Linear β schedule with cumulative products; timesteps are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidParam(format!("need at least 2 timesteps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParam(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let beta: Vec<f64> =
        (0..steps).map(|i| beta_start + i as f64 * (beta_end - beta_start) / (steps - 1) as f64).collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidParam(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }
}

/// `[0, 1]` map to the diffusion range.
pub fn to_diffusion_range<S: Scalar>(map: &Tensor<S>) -> Tensor<S> {
    map.map(|v| v + v - S::one())
}

/// Diffusion range back to a `[0, 1]` map, clamped.
pub fn from_diffusion_range<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let half = S::lit(0.5);
    x.map(|v| ((v + S::one()) * half).max(S::zero()).min(S::one()))
}

fn q_sample_ab<S: Scalar>(x0: &Tensor<S>, alpha_bar: f64, eps: &Tensor<S>) -> Result<Tensor<S>> {
    let (a, b) = (S::lit(alpha_bar.sqrt()), S::lit((1.0 - alpha_bar).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample<S: Scalar>(x0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    if x0.shape() != eps.shape() {
        return Err(shape_err!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()));
    }
    let lim = S::lit(1.0 + 1e-6);
    if x0.data().iter().any(|&v| v > lim || v < -lim) {
        return Err(Error::InvalidParam("x0 outside the diffusion range [-1, 1]".into()));
    }
    q_sample_ab(x0, sched.alpha_bar(t)?, eps)
}

/// Per-batch-element version of [`q_sample`] for a batch `N×…`.
pub fn q_sample_batch<S: Scalar>(x0: &Tensor<S>, ts: &[usize], eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    if x0.shape() != eps.shape() || x0.shape().first() != Some(&ts.len()) {
        return Err(shape_err!("batch q_sample: x0 {:?}, eps {:?}, {} timesteps", x0.shape(), eps.shape(), ts.len()));
    }
    let per = x0.len() / ts.len().max(1);
    let coef: Vec<(S, S)> = ts
        .iter()
        .map(|&t| sched.alpha_bar(t).map(|ab| (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()))))
        .collect::<Result<_>>()?;
    Ok(Tensor::from_fn(x0.shape(), |i| {
        let (a, b) = coef[i / per];
        a * x0.data()[i] + b * eps.data()[i]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReverseRule {
    /// `x_{t−1} = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
    X0Rescale,
    /// Posterior mean `(x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t` plus `σ_t = √β̃_t` noise for `t > 1`.
    DdpmAncestral,
}

impl ReverseRule {
    pub const ALL: [ReverseRule; 2] = [ReverseRule::X0Rescale, ReverseRule::DdpmAncestral];

    pub fn name(self) -> &'static str {
        match self {
            ReverseRule::X0Rescale => "x0-rescale",
            ReverseRule::DdpmAncestral => "ddpm-ancestral",
        }
    }
}

impl fmt::Display for ReverseRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReverseRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown reverse rule `{s}`")))
    }
}

/// One reverse step. `noise` is only read by the ancestral rule at `t > 1`.
pub fn denoise_step<S: Scalar>(
    xt: &Tensor<S>,
    t: usize,
    eps_pred: &Tensor<S>,
    sched: &NoiseSchedule,
    rule: ReverseRule,
    noise: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    if xt.shape() != eps_pred.shape() {
        return Err(shape_err!("x_t {:?} vs predicted noise {:?}", xt.shape(), eps_pred.shape()));
    }
    let ab = sched.alpha_bar(t)?;
    let out = match rule {
        ReverseRule::X0Rescale => {
            let (s1, inv) = (S::lit((1.0 - ab).sqrt()), S::lit(1.0 / ab.sqrt()));
            xt.zip_map(eps_pred, |x, e| (x - s1 * e) * inv)?
        }
        ReverseRule::DdpmAncestral => {
            let (a, b) = (sched.alpha(t)?, sched.beta(t)?);
            let (c, inv) = (S::lit(b / (1.0 - ab).sqrt()), S::lit(1.0 / a.sqrt()));
            let mut mean = xt.zip_map(eps_pred, |x, e| (x - c * e) * inv)?;
            if t > 1 {
                let z = noise.ok_or_else(|| Error::InvalidParam("ancestral step needs noise for t > 1".into()))?;
                let ab_prev = sched.alpha_bar(t - 1)?;
                let sigma = S::lit(((1.0 - ab_prev) / (1.0 - ab) * b).sqrt());
                mean = mean.zip_map(z, |m, n| m + sigma * n)?;
            }
            mean
        }
    };
    out.ensure_finite("denoise step")?;
    Ok(out)
}

/// Anything that predicts the noise in `x_t` at the given per-element timesteps.
pub trait NoisePredictor<S: Scalar> {
    fn predict(&self, xt: &Tensor<S>, ts: &[f64]) -> Result<Tensor<S>>;
}

impl<S: Scalar, F: Fn(&Tensor<S>, &[f64]) -> Result<Tensor<S>>> NoisePredictor<S> for F {
    fn predict(&self, xt: &Tensor<S>, ts: &[f64]) -> Result<Tensor<S>> {
        self(xt, ts)
    }
}

pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Per-element training draws: `t` uniform on `[1, T]` and standard normal noise of `shape`.
pub fn draw_training_noise<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], sched: &NoiseSchedule) -> (Vec<usize>, Tensor<S>) {
    let ts = (0..shape[0]).map(|_| rng.random_range(1..=sched.steps())).collect();
    (ts, standard_normal(rng, shape))
}

/// Noise-prediction MSE at random timesteps, averaged over elements and batch.
pub fn diffusion_loss<S: Scalar, R: Rng + ?Sized>(
    model: &impl NoisePredictor<S>,
    x0: &Tensor<S>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let (ts, eps) = draw_training_noise::<S, R>(rng, x0.shape(), sched);
    let xt = q_sample_batch(x0, &ts, &eps, sched)?;
    let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let pred = model.predict(&xt, &tf)?;
    pred.ensure_finite("noise predictor")?;
    let diff = pred.sub(&eps)?;
    Ok(diff.data().iter().map(|d| d.as_f64().powi(2)).sum::<f64>() / diff.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub rule: ReverseRule,
    /// Clamp every `x̂₀` estimate to `[−1, 1]`. Under the x0-rescale rule the
    /// state itself is the estimate; the ancestral rule re-derives the noise
    /// from the clamped estimate before stepping.
    pub clip: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { rule: ReverseRule::X0Rescale, clip: true }
    }
}

/// Generate a batch of `[0, 1]` maps of shape `N×1×H×W`; item `i` draws all of
/// its noise from the stream `(seeds[i], "sampling")`.
pub fn sample<S: Scalar>(
    model: &impl NoisePredictor<S>,
    shape: &[usize],
    sched: &NoiseSchedule,
    seeds: &[u64],
    cfg: SamplerConfig,
) -> Result<Tensor<S>> {
    if shape.first() != Some(&seeds.len()) {
        return Err(shape_err!("{} seeds for batch shape {shape:?}", seeds.len()));
    }
    let item: Vec<usize> = shape[1..].to_vec();
    let mut rngs: Vec<_> = seeds.iter().map(|&s| child_rng(s, "sampling", 0)).collect();
    let draw = |rngs: &mut Vec<rand_chacha::ChaCha8Rng>| -> Result<Tensor<S>> {
        let parts: Vec<Tensor<S>> = rngs.iter_mut().map(|r| standard_normal::<S, _>(r, &item).unsqueeze0()).collect();
        Tensor::stack(&parts)
    };
    let mut x = draw(&mut rngs)?;
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t as f64; seeds.len()];
        let mut eps = model.predict(&x, &ts)?;
        eps.ensure_finite("noise predictor")?;
        if cfg.clip && cfg.rule == ReverseRule::DdpmAncestral {
            eps = clipped_x0_noise(&x, &eps, sched.alpha_bar(t)?)?;
        }
        let noise = match cfg.rule {
            ReverseRule::DdpmAncestral if t > 1 => Some(draw(&mut rngs)?),
            _ => None,
        };
        x = denoise_step(&x, t, &eps, sched, cfg.rule, noise.as_ref())?;
        if cfg.clip && cfg.rule == ReverseRule::X0Rescale {
            x = clamp_unit(&x);
        }
    }
    Ok(from_diffusion_range(&if cfg.clip { clamp_unit(&x) } else { x }))
}

fn clamp_unit<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max(-S::one()).min(S::one()))
}

/// Noise consistent with `x_t` and the clamped estimate `x̂₀`.
fn clipped_x0_noise<S: Scalar>(xt: &Tensor<S>, eps: &Tensor<S>, ab: f64) -> Result<Tensor<S>> {
    let (sa, sb) = (S::lit(ab.sqrt()), S::lit((1.0 - ab).sqrt()));
    xt.zip_map(eps, |x, e| {
        let x0 = ((x - sb * e) / sa).max(-S::one()).min(S::one());
        (x - sa * x0) / sb
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
        standard_normal(&mut child_rng(seed, "diffusion-test", 0), shape)
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let s = make_schedule(50, 0.02, 0.4).unwrap();
        assert_eq!(s.beta(1).unwrap(), 0.02);
        assert_eq!(s.beta(50).unwrap(), 0.4);
        assert!((s.alpha_bar(1).unwrap() - 0.98).abs() < 1e-15);
        for t in 1..50 {
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
        for t in 1..=50 {
            let ab = s.alpha_bar(t).unwrap();
            assert!(ab.sqrt() > 0.0 && ab.sqrt() < 1.0 && (1.0 - ab).sqrt() > 0.0 && (1.0 - ab).sqrt() < 1.0);
        }
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(51).is_err());
        assert!(make_schedule(1, 0.02, 0.4).is_err());
        assert!(make_schedule(10, 0.5, 0.4).is_err());
        assert!(make_schedule(10, 0.0, 0.4).is_err());
    }

    #[test]
    fn q_sample_closed_forms() {
        let x0 = Tensor::<f32>::zeros(&[4, 4]);
        let eps = Tensor::full(&[4, 4], 1.0f32);
        let s = make_schedule(50, 0.02, 0.4).unwrap();
        let xt = q_sample(&x0, 1, &eps, &s).unwrap();
        assert!(xt.data().iter().all(|&v| (v - 0.141421).abs() < 1e-6));
        let x0 = Tensor::full(&[4], 0.3f32);
        let e4 = Tensor::full(&[4], 0.7f32);
        assert_eq!(q_sample_ab(&x0, 1.0, &e4).unwrap(), x0);
        assert_eq!(q_sample_ab(&x0, 0.0, &e4).unwrap(), e4);
        assert!(q_sample(&Tensor::full(&[2], 1.5f32), 1, &Tensor::zeros(&[2]), &s).is_err());
    }

    #[test]
    fn reverse_step_inverts_forward_noising() {
        let s = make_schedule(50, 0.02, 0.4).unwrap();
        for t in 1..=50 {
            let x0 = randn(&[8, 8], t as u64).map(|v| v.tanh()).cast::<f64>();
            let eps = randn(&[8, 8], 100 + t as u64).cast::<f64>();
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = denoise_step(&xt, t, &eps, &s, ReverseRule::X0Rescale, None).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() <= 1e-6, "t={t}");
        }
    }

    #[test]
    fn single_precision_roundtrip_error_scales_with_inverse_sqrt_alpha_bar() {
        // x_t carries f32 rounding that the step amplifies by 1/√ᾱ_t
        let s = make_schedule(50, 0.02, 0.4).unwrap();
        for t in 1..=50 {
            let x0 = randn(&[8, 8], t as u64).map(|v| v.tanh());
            let eps = randn(&[8, 8], 100 + t as u64);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = denoise_step(&xt, t, &eps, &s, ReverseRule::X0Rescale, None).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let tol = if ab > 0.25 { 1e-6 } else { 1e-6 / ab.sqrt() as f32 };
            assert!(back.max_abs_diff(&x0).unwrap() <= tol, "t={t}");
        }
    }

    #[test]
    fn reverse_step_closed_forms() {
        let s = make_schedule(50, 0.02, 0.4).unwrap();
        let xt = Tensor::full(&[3], 0.5f64);
        let step = denoise_step(&xt, 1, &Tensor::full(&[3], 0.1), &s, ReverseRule::X0Rescale, None).unwrap();
        let expect = (0.5 - 0.02f64.sqrt() * 0.1) / 0.98f64.sqrt();
        assert!((expect - 0.490790).abs() < 1e-6);
        assert!(step.data().iter().all(|&v| (v - expect).abs() < 1e-12));
        let zero = denoise_step(&xt, 7, &Tensor::zeros(&[3]), &s, ReverseRule::X0Rescale, None).unwrap();
        let ab = s.alpha_bar(7).unwrap();
        assert!(zero.data().iter().all(|&v| (v - 0.5 / ab.sqrt()).abs() < 1e-12));
        assert!(denoise_step(&xt, 5, &Tensor::zeros(&[3]), &s, ReverseRule::DdpmAncestral, None).is_err());
        assert!(denoise_step(&xt, 0, &Tensor::zeros(&[3]), &s, ReverseRule::X0Rescale, None).is_err());
    }

    #[test]
    fn loss_of_perfect_and_zero_predictors() {
        let s = make_schedule(50, 0.02, 0.4).unwrap();
        let x0 = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        // x0 = 0 makes the noisy input a scaled copy of the drawn noise
        let perfect = |xt: &Tensor<f64>, ts: &[f64]| -> Result<Tensor<f64>> {
            let ab = s.alpha_bar(ts[0] as usize)?;
            Ok(xt.scale(1.0 / (1.0 - ab).sqrt()))
        };
        let l = diffusion_loss(&perfect, &x0, &s, &mut child_rng(1, "t", 0)).unwrap();
        assert!(l < 1e-20);

        let zero = |xt: &Tensor<f64>, _: &[f64]| -> Result<Tensor<f64>> { Ok(Tensor::zeros(xt.shape())) };
        let mut rng = child_rng(2, "t", 0);
        let x0 = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let draws: Vec<f64> = (0..10_000).map(|_| diffusion_loss(&zero, &x0, &s, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        // chi-square(1) has variance 2
        let sigma = (2.0f64 / draws.len() as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
        assert!(draws.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sampling_with_an_oracle_recovers_x0() {
        let s = make_schedule(50, 0.02, 0.4).unwrap();
        let x0 = randn(&[2, 1, 8, 8], 9).map(|v| v.tanh() * 0.9).cast::<f64>();
        let oracle = |xt: &Tensor<f64>, ts: &[f64]| -> Result<Tensor<f64>> {
            let ab = s.alpha_bar(ts[0] as usize)?;
            xt.zip_map(&x0, |x, z| (x - ab.sqrt() * z) / (1.0 - ab).sqrt())
        };
        for clip in [false, true] {
            let out = sample(&oracle, &[2, 1, 8, 8], &s, &[1, 2], SamplerConfig { rule: ReverseRule::X0Rescale, clip }).unwrap();
            assert!(out.max_abs_diff(&from_diffusion_range(&x0)).unwrap() < 1e-5);
        }
    }

    #[test]
    fn sampling_is_seed_deterministic_and_bounded() {
        let s = make_schedule(10, 0.02, 0.4).unwrap();
        let m = |xt: &Tensor<f32>, _: &[f64]| -> Result<Tensor<f32>> { Ok(xt.scale(0.3)) };
        for rule in ReverseRule::ALL {
            let cfg = SamplerConfig { rule, clip: false };
            let a = sample(&m, &[2, 1, 8, 8], &s, &[4, 5], cfg).unwrap();
            assert_eq!(a, sample(&m, &[2, 1, 8, 8], &s, &[4, 5], cfg).unwrap());
            assert_ne!(a, sample(&m, &[2, 1, 8, 8], &s, &[4, 6], cfg).unwrap());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
