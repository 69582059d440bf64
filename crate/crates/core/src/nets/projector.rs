use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::unet::Conditions;
use crate::error::{shape_err, Error, Result};
use crate::layers::{Layer, LayerSpec};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which U-Net stages receive detector features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    /// `f1..f3` into the encoder stages, `f4` into the bottleneck.
    EncoderAll,
    /// Only `f4`, into the bottleneck.
    FinalStageOnly,
    /// `f3, f2, f1` into decoder stages 1..3 (mirroring the encoder), `f4` into the bottleneck.
    Decoder,
}

impl Placement {
    pub const ALL: [Placement; 3] = [Placement::EncoderAll, Placement::FinalStageOnly, Placement::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Placement::EncoderAll => "encoder-all",
            Placement::FinalStageOnly => "final-stage-only",
            Placement::Decoder => "decoder",
        }
    }

    /// `(detector stage, U-Net stage)` pairs, zero-based.
    pub fn routes(self) -> &'static [(usize, usize)] {
        match self {
            Placement::EncoderAll => &[(0, 0), (1, 1), (2, 2), (3, 3)],
            Placement::FinalStageOnly => &[(3, 3)],
            Placement::Decoder => &[(2, 4), (1, 5), (0, 6), (3, 3)],
        }
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParam(format!("unknown placement `{s}`")))
    }
}

/// One `1×1 conv → bilinear resize` adapter per route.
#[derive(Clone, Debug)]
pub struct Projectors {
    pub placement: Placement,
    routes: Vec<(usize, usize, Layer, Layer)>,
}

#[derive(Clone, Debug)]
pub struct ProjectorCache<S> {
    /// Per route: the conv input and the resize input.
    inputs: Vec<(Tensor<S>, Tensor<S>)>,
}

impl Projectors {
    /// `det_shapes` / `unet_shapes` are the `C×H×W` activation shapes on each side.
    pub fn new(placement: Placement, det_shapes: &[[usize; 3]], unet_shapes: &[[usize; 3]]) -> Result<Self> {
        if det_shapes.len() != 4 || unet_shapes.len() != 7 {
            return Err(shape_err!("projectors need 4 detector and 7 U-Net stage shapes"));
        }
        let routes = placement
            .routes()
            .iter()
            .map(|&(d, u)| {
                let [cin, ..] = det_shapes[d];
                let [cout, h, w] = unet_shapes[u];
                let name = format!("proj.f{}", d + 1);
                (
                    d,
                    u,
                    Layer::new(format!("{name}.conv"), LayerSpec::conv(cin, cout, 1, 1, 0)),
                    Layer::new(format!("{name}.resize"), LayerSpec::BilinearResize { out_h: h, out_w: w }),
                )
            })
            .collect();
        Ok(Self { placement, routes })
    }

    pub fn init_params<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R, params: &mut ParamSet<S>) {
        for (_, _, conv, _) in &self.routes {
            conv.init_params(rng, params);
        }
    }

    pub fn forward<S: Scalar>(&self, pyramid: &[Tensor<S>], params: &ParamSet<S>) -> Result<(Conditions<S>, ProjectorCache<S>)> {
        if pyramid.len() != 4 {
            return Err(shape_err!("expected 4 pyramid levels, got {}", pyramid.len()));
        }
        let mut conds = vec![None; 7];
        let mut inputs = Vec::with_capacity(self.routes.len());
        for (d, u, conv, resize) in &self.routes {
            let a = conv.forward(&pyramid[*d], params)?;
            conds[*u] = Some(resize.forward(&a, params)?);
            inputs.push((pyramid[*d].clone(), a));
        }
        Ok((conds, ProjectorCache { inputs }))
    }

    pub fn infer<S: Scalar>(&self, pyramid: &[Tensor<S>], params: &ParamSet<S>) -> Result<Conditions<S>> {
        Ok(self.forward(pyramid, params)?.0)
    }

    /// Gradient for each pyramid level (`None` for levels no route reads).
    pub fn backward<S: Scalar>(
        &self,
        cache: &ProjectorCache<S>,
        params: &ParamSet<S>,
        grad_conds: &[Tensor<S>],
        grads: &mut ParamSet<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let mut out = vec![None; 4];
        for ((d, u, conv, resize), (x, a)) in self.routes.iter().zip(&cache.inputs) {
            let g = grad_conds.get(*u).ok_or_else(|| shape_err!("missing condition gradient for stage {u}"))?;
            let ga = resize.backward_into(a, params, g, grads)?;
            out[*d] = Some(conv.backward_into(x, params, &ga, grads)?);
        }
        Ok(out)
    }
}
