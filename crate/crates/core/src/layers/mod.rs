//! Closed set of layers with hand-written forward and backward passes.
//!
//! There is no autodiff graph: every network in [`crate::nets`] chains these
//! layers explicitly and walks its own cache backwards.

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod spatial;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use activation::{gelu, gelu_grad, sigmoid, silu, silu_grad};
pub use loss::{mse_loss, softmax, softmax_cross_entropy};

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    /// Weight layout `in_ch × out_ch × k × k`.
    ConvTranspose2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    Linear { in_features: usize, out_features: usize },
    GroupNorm { groups: usize, channels: usize },
    Silu,
    Gelu,
    Sigmoid,
    /// Non-overlapping `k×k` average pooling.
    AvgPool { kernel: usize },
    GlobalAvgPool,
    NearestUpsample { scale: usize },
    /// Half-pixel-centred bilinear resampling to a fixed output size.
    BilinearResize { out_h: usize, out_w: usize },
    /// Mean over the batch of `-Σ target·log softmax(logits)`; target is the `target` param.
    SoftmaxCrossEntropy,
    /// Mean squared error against the `target` param.
    Mse,
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding }
    }

    /// Group normalization with 8 groups, or one group per channel below 8 channels.
    pub fn group_norm(channels: usize) -> Self {
        let mut groups = channels.min(8);
        while channels % groups != 0 {
            groups -= 1;
        }
        LayerSpec::GroupNorm { groups, channels }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::ConvTranspose2d { .. } => "transposed-conv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::GroupNorm { .. } => "group-normalization",
            LayerSpec::Silu => "silu",
            LayerSpec::Gelu => "gelu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::AvgPool { .. } => "average-pool",
            LayerSpec::GlobalAvgPool => "global-average-pool",
            LayerSpec::NearestUpsample { .. } => "nearest-upsample",
            LayerSpec::BilinearResize { .. } => "bilinear-resize",
            LayerSpec::SoftmaxCrossEntropy => "softmax-cross-entropy",
            LayerSpec::Mse => "mse",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(format!("{}: {m}", self.kind_name())));
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, .. }
            | LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, stride, .. } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
                    return bad("channels, kernel and stride must be positive");
                }
            }
            LayerSpec::Linear { in_features, out_features } => {
                if in_features == 0 || out_features == 0 {
                    return bad("features must be positive");
                }
            }
            LayerSpec::GroupNorm { groups, channels } => {
                if groups == 0 || channels % groups != 0 {
                    return bad("channels must be divisible by groups");
                }
            }
            LayerSpec::AvgPool { kernel } if kernel == 0 => return bad("kernel must be positive"),
            LayerSpec::NearestUpsample { scale } if scale == 0 => return bad("scale must be positive"),
            LayerSpec::BilinearResize { out_h, out_w } if out_h == 0 || out_w == 0 => {
                return bad("output size must be positive")
            }
            _ => {}
        }
        Ok(())
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let nchw = || match *input {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err!("{} expects NCHW input, got {:?}", self.kind_name(), input)),
        };
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                let (n, c, h, w) = nchw()?;
                if c != in_ch {
                    return Err(shape_err!("conv2d expects {in_ch} channels, got {c}"));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(shape_err!("conv2d kernel {kernel} larger than padded input {h}x{w}"));
                }
                Ok(vec![n, out_ch, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1])
            }
            LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, stride, padding } => {
                let (n, c, h, w) = nchw()?;
                if c != in_ch {
                    return Err(shape_err!("transposed-conv2d expects {in_ch} channels, got {c}"));
                }
                let oh = ((h - 1) * stride + kernel).checked_sub(2 * padding);
                let ow = ((w - 1) * stride + kernel).checked_sub(2 * padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok(vec![n, out_ch, oh, ow]),
                    _ => Err(shape_err!("transposed-conv2d padding too large for {h}x{w}")),
                }
            }
            LayerSpec::Linear { in_features, out_features } => match *input {
                [n, f] if f == in_features => Ok(vec![n, out_features]),
                _ => Err(shape_err!("linear expects [N, {in_features}], got {:?}", input)),
            },
            LayerSpec::GroupNorm { channels, .. } => {
                let (_, c, _, _) = nchw()?;
                if c != channels {
                    return Err(shape_err!("group-normalization expects {channels} channels, got {c}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Silu | LayerSpec::Gelu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::AvgPool { kernel } => {
                let (n, c, h, w) = nchw()?;
                if h % kernel != 0 || w % kernel != 0 {
                    return Err(shape_err!("average-pool {kernel} does not divide {h}x{w}"));
                }
                Ok(vec![n, c, h / kernel, w / kernel])
            }
            LayerSpec::GlobalAvgPool => {
                let (n, c, _, _) = nchw()?;
                Ok(vec![n, c])
            }
            LayerSpec::NearestUpsample { scale } => {
                let (n, c, h, w) = nchw()?;
                Ok(vec![n, c, h * scale, w * scale])
            }
            LayerSpec::BilinearResize { out_h, out_w } => {
                let (n, c, _, _) = nchw()?;
                Ok(vec![n, c, out_h, out_w])
            }
            LayerSpec::SoftmaxCrossEntropy => match *input {
                [_, _] => Ok(vec![1]),
                _ => Err(shape_err!("softmax-cross-entropy expects [N, K], got {:?}", input)),
            },
            LayerSpec::Mse => Ok(vec![1]),
        }
    }

    /// Trainable parameter kinds with their shapes.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => {
                vec![("weight", vec![out_ch, in_ch, kernel, kernel]), ("bias", vec![out_ch])]
            }
            LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, .. } => {
                vec![("weight", vec![in_ch, out_ch, kernel, kernel]), ("bias", vec![out_ch])]
            }
            LayerSpec::Linear { in_features, out_features } => {
                vec![("weight", vec![out_features, in_features]), ("bias", vec![out_features])]
            }
            LayerSpec::GroupNorm { channels, .. } => vec![("weight", vec![channels]), ("bias", vec![channels])],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { in_ch, kernel, .. } | LayerSpec::ConvTranspose2d { in_ch, kernel, .. } => {
                in_ch * kernel * kernel
            }
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => 1,
        }
    }
}

/// Gradients produced by [`Layer::backward`].
#[derive(Clone, Debug)]
pub struct LayerGrads<S> {
    pub input: Tensor<S>,
    pub params: Vec<(String, Tensor<S>)>,
}

/// A [`LayerSpec`] bound to a parameter-name prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self { name: name.into(), spec }
    }

    pub fn param_name(&self, kind: &str) -> String {
        format!("{}.{kind}", self.name)
    }

    /// He-style fan-in uniform weights, zero biases; ones/zeros for normalization.
    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, params: &mut ParamSet<S>) {
        let bound = (6.0 / self.spec.fan_in() as f64).sqrt();
        for (kind, shape) in self.spec.param_shapes() {
            let t = match (&self.spec, kind) {
                (LayerSpec::GroupNorm { .. }, "weight") => Tensor::full(&shape, S::one()),
                (_, "weight") => Tensor::from_fn(&shape, |_| S::lit(rng.random_range(-bound..bound))),
                _ => Tensor::zeros(&shape),
            };
            params.insert(self.param_name(kind), t);
        }
    }

    fn param<'a, S: Scalar>(&self, params: &'a ParamSet<S>, kind: &str) -> Result<&'a Tensor<S>> {
        let t = params.get(&self.param_name(kind))?;
        if let Some((_, shape)) = self.spec.param_shapes().into_iter().find(|(k, _)| *k == kind) {
            if t.shape() != shape.as_slice() {
                return Err(shape_err!("param `{}` has shape {:?}, expected {:?}", self.param_name(kind), t.shape(), shape));
            }
        }
        Ok(t)
    }

    pub fn forward<S: Scalar>(&self, x: &Tensor<S>, params: &ParamSet<S>) -> Result<Tensor<S>> {
        let out_shape = self.spec.output_shape(x.shape())?;
        let y = match self.spec {
            LayerSpec::Conv2d { kernel, stride, padding, .. } => {
                conv::conv2d_forward(x, self.param(params, "weight")?, self.param(params, "bias")?, kernel, stride, padding, &out_shape)
            }
            LayerSpec::ConvTranspose2d { kernel, stride, padding, .. } => conv::conv_t2d_forward(
                x,
                self.param(params, "weight")?,
                self.param(params, "bias")?,
                kernel,
                stride,
                padding,
                &out_shape,
            ),
            LayerSpec::Linear { .. } => {
                linear::forward(x, self.param(params, "weight")?, self.param(params, "bias")?)
            }
            LayerSpec::GroupNorm { groups, .. } => {
                norm::group_norm_forward(x, self.param(params, "weight")?, self.param(params, "bias")?, groups)
            }
            LayerSpec::Silu => x.map(silu),
            LayerSpec::Gelu => x.map(gelu),
            LayerSpec::Sigmoid => x.map(sigmoid),
            LayerSpec::AvgPool { kernel } => spatial::avg_pool_forward(x, kernel, &out_shape),
            LayerSpec::GlobalAvgPool => spatial::gap_forward(x),
            LayerSpec::NearestUpsample { scale } => spatial::upsample_forward(x, scale, &out_shape),
            LayerSpec::BilinearResize { out_h, out_w } => spatial::bilinear_forward(x, out_h, out_w),
            LayerSpec::SoftmaxCrossEntropy => {
                let target = params.get(&self.param_name("target"))?;
                Tensor::scalar(softmax_cross_entropy(x, target)?.0)
            }
            LayerSpec::Mse => {
                let target = params.get(&self.param_name("target"))?;
                Tensor::scalar(mse_loss(x, target)?.0)
            }
        };
        debug_assert_eq!(y.shape(), out_shape.as_slice());
        y.ensure_finite(&format!("{} ({})", self.name, self.spec.kind_name()))?;
        Ok(y)
    }

    pub fn backward<S: Scalar>(&self, x: &Tensor<S>, params: &ParamSet<S>, grad_out: &Tensor<S>) -> Result<LayerGrads<S>> {
        let out_shape = self.spec.output_shape(x.shape())?;
        if grad_out.shape() != out_shape.as_slice() {
            return Err(shape_err!(
                "{}: grad_out {:?} does not match output {:?}",
                self.name,
                grad_out.shape(),
                out_shape
            ));
        }
        let pn = |k: &str| self.param_name(k);
        let grads = match self.spec {
            LayerSpec::Conv2d { kernel, stride, padding, .. } => {
                let (gx, gw, gb) = conv::conv2d_backward(x, self.param(params, "weight")?, grad_out, kernel, stride, padding);
                LayerGrads { input: gx, params: vec![(pn("weight"), gw), (pn("bias"), gb)] }
            }
            LayerSpec::ConvTranspose2d { kernel, stride, padding, .. } => {
                let (gx, gw, gb) = conv::conv_t2d_backward(x, self.param(params, "weight")?, grad_out, kernel, stride, padding);
                LayerGrads { input: gx, params: vec![(pn("weight"), gw), (pn("bias"), gb)] }
            }
            LayerSpec::Linear { .. } => {
                let (gx, gw, gb) = linear::backward(x, self.param(params, "weight")?, grad_out);
                LayerGrads { input: gx, params: vec![(pn("weight"), gw), (pn("bias"), gb)] }
            }
            LayerSpec::GroupNorm { groups, .. } => {
                let (gx, gw, gb) = norm::group_norm_backward(x, self.param(params, "weight")?, grad_out, groups);
                LayerGrads { input: gx, params: vec![(pn("weight"), gw), (pn("bias"), gb)] }
            }
            LayerSpec::Silu => simple(x.zip_map(grad_out, |v, g| g * silu_grad(v))?),
            LayerSpec::Gelu => simple(x.zip_map(grad_out, |v, g| g * gelu_grad(v))?),
            LayerSpec::Sigmoid => simple(x.zip_map(grad_out, |v, g| {
                let s = sigmoid(v);
                g * s * (S::one() - s)
            })?),
            LayerSpec::AvgPool { kernel } => simple(spatial::avg_pool_backward(x.shape(), grad_out, kernel)),
            LayerSpec::GlobalAvgPool => simple(spatial::gap_backward(x.shape(), grad_out)),
            LayerSpec::NearestUpsample { scale } => simple(spatial::upsample_backward(x.shape(), grad_out, scale)),
            LayerSpec::BilinearResize { out_h, out_w } => {
                simple(spatial::bilinear_backward(x.shape(), grad_out, out_h, out_w))
            }
            LayerSpec::SoftmaxCrossEntropy => {
                let (_, g) = softmax_cross_entropy(x, params.get(&pn("target"))?)?;
                simple(g.scale(grad_out.data()[0]))
            }
            LayerSpec::Mse => {
                let (_, g) = mse_loss(x, params.get(&pn("target"))?)?;
                simple(g.scale(grad_out.data()[0]))
            }
        };
        Ok(grads)
    }

    /// Backward pass that accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward_into<S: Scalar>(
        &self,
        x: &Tensor<S>,
        params: &ParamSet<S>,
        grad_out: &Tensor<S>,
        grads: &mut ParamSet<S>,
    ) -> Result<Tensor<S>> {
        let g = self.backward(x, params, grad_out)?;
        for (name, t) in &g.params {
            grads.accumulate(name, t)?;
        }
        Ok(g.input)
    }
}

fn simple<S>(input: Tensor<S>) -> LayerGrads<S> {
    LayerGrads { input, params: Vec::new() }
}
