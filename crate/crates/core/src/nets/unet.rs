use rand::Rng;

use super::{add_channel_bias, channel_sums, Chain, ChainCache};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Layer, LayerSpec};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stage names in forward order: three encoder stages, the bottleneck, three decoder stages.
pub const UNET_STAGES: [&str; 7] = ["enc1", "enc2", "enc3", "bottleneck", "dec1", "dec2", "dec3"];

/// Per-stage additive conditions, indexed like [`UNET_STAGES`].
pub type Conditions<S> = Vec<Option<Tensor<S>>>;

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub channels: [usize; 7],
    pub time_dim: usize,
    pub time_hidden: usize,
    /// Largest accepted timestep.
    pub max_t: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { channels: [16, 16, 32, 64, 32, 16, 16], time_dim: 32, time_hidden: 64, max_t: 50 }
    }
}

/// Sinusoidal embedding `[sin(t·f_0..), cos(t·f_0..)]` with `f_i = 10000^(−i/(dim/2))`.
pub fn timestep_embedding<S: Scalar>(ts: &[f64], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |k| {
        let (n, j) = (k / dim, k % dim);
        let i = j % half;
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = ts[n] * f;
        S::lit(if j < half { a.sin() } else { a.cos() })
    })
}

/// Timestep-conditioned U-Net predicting noise for a one-channel map.
///
/// Each stage is `conv → group norm → SiLU`, followed by an additive
/// per-channel timestep bias and the stage's optional condition. Encoder
/// stages downsample by 2×2 average pooling; decoder stages upsample by
/// nearest neighbour and concatenate the matching encoder output.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    blocks: Vec<Chain>,
    time_mlp: Chain,
    time_proj: Vec<Layer>,
    down: Layer,
    up: Layer,
    out: Layer,
}

#[derive(Clone, Debug)]
pub struct UNetCache<S> {
    blocks: Vec<ChainCache<S>>,
    time_mlp: ChainCache<S>,
    time_hidden: Tensor<S>,
    /// Input of each downsampling / upsampling, by the stage consuming it.
    resample_in: Vec<Option<Tensor<S>>>,
    skip_channels: Vec<usize>,
    last: Tensor<S>,
}

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        let c = config.channels;
        if c.contains(&0) || config.time_dim < 2 || config.time_dim % 2 != 0 || config.time_hidden == 0 {
            return Err(Error::InvalidParam(format!("invalid U-Net config {config:?}")));
        }
        let input_ch = [1, c[0], c[1], c[2], c[3] + c[2], c[4] + c[1], c[5] + c[0]];
        let blocks = (0..7)
            .map(|i| Chain::conv_block(&format!("unet.{}", UNET_STAGES[i]), "", input_ch[i], c[i], 1, LayerSpec::Silu))
            .collect();
        let th = config.time_hidden;
        let time_mlp = Chain::new(vec![
            Layer::new("unet.time.fc1", LayerSpec::Linear { in_features: config.time_dim, out_features: th }),
            Layer::new("unet.time.act1", LayerSpec::Silu),
            Layer::new("unet.time.fc2", LayerSpec::Linear { in_features: th, out_features: th }),
            Layer::new("unet.time.act2", LayerSpec::Silu),
        ]);
        let time_proj = (0..7)
            .map(|i| {
                Layer::new(format!("unet.{}.time", UNET_STAGES[i]), LayerSpec::Linear { in_features: th, out_features: c[i] })
            })
            .collect();
        Ok(Self {
            blocks,
            time_mlp,
            time_proj,
            down: Layer::new("unet.down", LayerSpec::AvgPool { kernel: 2 }),
            up: Layer::new("unet.up", LayerSpec::NearestUpsample { scale: 2 }),
            out: Layer::new("unet.out.conv", LayerSpec::conv(c[6], 1, 3, 1, 1)),
            config,
        })
    }

    /// Activation shape `C×H×W` of each stage for a `size×size` map.
    pub fn stage_shapes(&self, size: usize) -> Vec<[usize; 3]> {
        let scale = [1, 2, 4, 8, 4, 2, 1];
        (0..7).map(|i| [self.config.channels[i], size / scale[i], size / scale[i]]).collect()
    }

    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, params: &mut ParamSet<S>) {
        for b in &self.blocks {
            b.init_params(rng, params);
        }
        self.time_mlp.init_params(rng, params);
        for l in &self.time_proj {
            l.init_params(rng, params);
        }
        self.out.init_params(rng, params);
    }

    fn check(&self, x: &[usize], ts: &[f64], conds: &Conditions<impl Scalar>) -> Result<()> {
        if x.len() != 4 || x[1] != 1 || x[2] % 8 != 0 || x[3] % 8 != 0 || x[2] == 0 || x[3] == 0 {
            return Err(shape_err!("U-Net expects N×1×H×W with H, W positive multiples of 8, got {x:?}"));
        }
        if ts.len() != x[0] {
            return Err(shape_err!("{} timesteps for a batch of {}", ts.len(), x[0]));
        }
        if let Some(t) = ts.iter().find(|&&t| !(t >= 1.0 && t <= self.config.max_t as f64)) {
            return Err(Error::InvalidParam(format!("timestep {t} outside [1, {}]", self.config.max_t)));
        }
        if conds.len() > 7 {
            return Err(shape_err!("{} condition slots for 7 stages", conds.len()));
        }
        Ok(())
    }

    fn inject<S: Scalar>(&self, h: &mut Tensor<S>, i: usize, bias: &Tensor<S>, conds: &Conditions<S>) -> Result<()> {
        add_channel_bias(h, bias)?;
        if let Some(Some(c)) = conds.get(i) {
            h.add_assign(c).map_err(|_| {
                shape_err!("condition for {} is {:?}, stage activation is {:?}", UNET_STAGES[i], c.shape(), h.shape())
            })?;
        }
        Ok(())
    }

    /// Predicted noise for `x` at (possibly fractional) timesteps `ts`.
    pub fn forward<S: Scalar>(
        &self,
        x: &Tensor<S>,
        ts: &[f64],
        conds: &Conditions<S>,
        params: &ParamSet<S>,
    ) -> Result<(Tensor<S>, UNetCache<S>)> {
        self.check(x.shape(), ts, conds)?;
        let temb = timestep_embedding::<S>(ts, self.config.time_dim);
        let (time_hidden, time_mlp) = self.time_mlp.forward(&temb, params)?;
        let mut blocks = Vec::with_capacity(7);
        let mut resample_in = vec![None; 7];
        let mut skip_channels = vec![0; 7];
        let mut outs: Vec<Tensor<S>> = Vec::with_capacity(7);
        for i in 0..7 {
            let input = match i {
                0 => x.clone(),
                1..=3 => {
                    let prev = outs[i - 1].clone();
                    let d = self.down.forward(&prev, params)?;
                    resample_in[i] = Some(prev);
                    d
                }
                _ => {
                    let prev = outs[i - 1].clone();
                    let u = self.up.forward(&prev, params)?;
                    resample_in[i] = Some(prev);
                    let skip = &outs[6 - i];
                    skip_channels[i] = skip.shape()[1];
                    Tensor::concat_channels(&u, skip)?
                }
            };
            let (mut h, cache) = self.blocks[i].forward(&input, params)?;
            let bias = self.time_proj[i].forward(&time_hidden, params)?;
            self.inject(&mut h, i, &bias, conds)?;
            blocks.push(cache);
            outs.push(h);
        }
        let last = outs.pop().expect("seven stages");
        let eps = self.out.forward(&last, params)?;
        Ok((eps, UNetCache { blocks, time_mlp, time_hidden, resample_in, skip_channels, last }))
    }

    /// Forward pass without recording a cache.
    pub fn infer<S: Scalar>(&self, x: &Tensor<S>, ts: &[f64], conds: &Conditions<S>, params: &ParamSet<S>) -> Result<Tensor<S>> {
        self.check(x.shape(), ts, conds)?;
        let temb = timestep_embedding::<S>(ts, self.config.time_dim);
        let time_hidden = self.time_mlp.infer(&temb, params)?;
        let mut outs: Vec<Tensor<S>> = Vec::with_capacity(7);
        for i in 0..7 {
            let input = match i {
                0 => x.clone(),
                1..=3 => self.down.forward(&outs[i - 1], params)?,
                _ => Tensor::concat_channels(&self.up.forward(&outs[i - 1], params)?, &outs[6 - i])?,
            };
            let mut h = self.blocks[i].infer(&input, params)?;
            let bias = self.time_proj[i].forward(&time_hidden, params)?;
            self.inject(&mut h, i, &bias, conds)?;
            outs.push(h);
        }
        self.out.forward(&outs[6], params)
    }

    /// Returns the input gradient and the gradient of every stage's condition slot.
    pub fn backward<S: Scalar>(
        &self,
        cache: &UNetCache<S>,
        params: &ParamSet<S>,
        grad_out: &Tensor<S>,
        grads: &mut ParamSet<S>,
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        let mut stage_grads: Vec<Option<Tensor<S>>> = vec![None; 7];
        stage_grads[6] = Some(self.out.backward_into(&cache.last, params, grad_out, grads)?);
        let mut cond_grads: Vec<Tensor<S>> = Vec::with_capacity(7);
        let mut g_time = Tensor::zeros(cache.time_hidden.shape());
        let mut g_input = None;
        for i in (0..7).rev() {
            let g = stage_grads[i].take().expect("gradient reaches every stage");
            let gb = channel_sums(&g)?;
            g_time.add_assign(&self.time_proj[i].backward_into(&cache.time_hidden, params, &gb, grads)?)?;
            let gin = self.blocks[i].backward(&cache.blocks[i], params, &g, grads)?;
            cond_grads.push(g);
            let acc = |slot: &mut Option<Tensor<S>>, t: Tensor<S>| -> Result<()> {
                match slot {
                    Some(s) => s.add_assign(&t),
                    None => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match i {
                0 => g_input = Some(gin),
                1..=3 => {
                    let prev = cache.resample_in[i].as_ref().expect("cached");
                    acc(&mut stage_grads[i - 1], self.down.backward_into(prev, params, &gin, grads)?)?;
                }
                _ => {
                    let up_ch = gin.shape()[1] - cache.skip_channels[i];
                    let (g_up, g_skip) = gin.split_channels(up_ch)?;
                    let prev = cache.resample_in[i].as_ref().expect("cached");
                    acc(&mut stage_grads[i - 1], self.up.backward_into(prev, params, &g_up, grads)?)?;
                    acc(&mut stage_grads[6 - i], g_skip)?;
                }
            }
        }
        self.time_mlp.backward(&cache.time_mlp, params, &g_time, grads)?;
        cond_grads.reverse();
        Ok((g_input.expect("stage 0 visited"), cond_grads))
    }
}
