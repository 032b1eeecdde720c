//! Deterministic numeric substrate: tensors, counter-based seeded
//! randomness, a fixed MLP family with exact hand-derived gradients, an
//! adaptive first-order optimizer, and small symmetric linear algebra.
//!
//! Everything here is generic over [`Scalar`]; the rest of the crate uses
//! the `f64` aliases exported from the crate root.

pub mod adam;
pub mod linalg;
pub mod mlp;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{mlp_backward, mlp_forward, Activation, MlpActivations, MlpParams, MlpSpec};
pub use rng::{gaussian_sample, standard_normal, SeededRng};
pub use scalar::Scalar;
pub use tensor::Tensor;
