//! Diffusion-based adversarial augmentation for contrastive image-prompt
//! training, at desk scale.
//!
//! The pipeline: train a small conditional denoising diffusion model on
//! synthetic paired data, invert training images to their deterministic
//! sampler latents, move those latents with a budgeted transport map,
//! decode them back into adversarial training images, and train a
//! two-tower contrastive model on real plus adversarial samples. The
//! `transport` module also verifies the distributional claims behind the
//! transport map (Gaussian 2-Wasserstein budget, covariance preservation)
//! by Monte-Carlo, and `evalharness` reproduces the ablation structure
//! (budget sweep, variants-per-source sweep, transform comparison) over
//! seeds.
//!
//! The numeric core (`coremath`) is generic over its scalar type; the
//! pipeline modules work with the `f64` instantiation via the aliases
//! exported below.

pub mod advgen;
pub mod contrastive;
pub mod coremath;
pub mod datagen;
pub mod diffusion;
mod error;
pub mod evalharness;
mod io_util;
pub mod transport;

pub use error::{Error, Result};

/// Scalar type the shipped pipeline runs on.
pub type Real = f64;

pub type Tensor = coremath::Tensor<Real>;
pub type MlpParams = coremath::MlpParams<Real>;
pub type MlpActivations = coremath::MlpActivations<Real>;
pub type AdamConfig = coremath::AdamConfig<Real>;
pub type AdamState = coremath::AdamState<Real>;

pub use coremath::SeededRng;
