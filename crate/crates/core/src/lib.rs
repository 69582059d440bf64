//! Forgery-artifact localization with conditional diffusion.
//!
//! A small multi-stage CNN detector extracts a feature pyramid; conditioning
//! projectors inject it into a timestep-conditioned U-Net that denoises DSSIM
//! maps; an artifact extractor and a gated fusion head turn the generated map
//! into a real/fake decision. Everything runs on a minimal CPU tensor backend
//! with hand-written gradients, generic over `f32`/`f64`.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod diffusion;
pub mod dssim;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod imageio;
pub mod layers;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Training precision.
pub type Tensor32 = Tensor<f32>;
/// Gradient-check precision.
pub type Tensor64 = Tensor<f64>;
pub type Params32 = ParamSet<f32>;
pub type Params64 = ParamSet<f64>;
