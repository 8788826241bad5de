//! Structure- and content-guided latent video diffusion, desk scale.
//!
//! The crate trains a latent video diffusion model on a procedural
//! moving-shapes corpus with ground-truth depth, then edits input videos by
//! keeping the depth-derived structure while replacing the content/style.
//! Inference exposes three knobs: content guidance `omega`, temporal guidance
//! `omega_t`, and structure corruption level `t_s`.

pub mod codec;
pub mod cond;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod layers;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::{Rng, Tensor};
