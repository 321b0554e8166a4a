//! Toy latent video diffusion with relational feature distillation.
//!
//! The crate trains a small video diffusion transformer while aligning the
//! pairwise cosine-similarity structure of its hidden tokens to a frozen
//! self-supervised video encoder, and measures the effect with an
//! object-contact-prediction linear probe on synthetic bouncing-ball clips.

extern crate blas_src;

pub mod align;
pub mod ckpt;
pub mod dataset;
pub mod dit;
pub mod error;
pub mod grid;
pub mod latent;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod relations;
pub mod render;
pub mod scalar;
pub mod schedule;
pub mod sim;
pub mod train;
pub mod vfm;

pub use error::{Error, Result};
pub use grid::{FeatureGrid, VideoTensor};
pub use scalar::Scalar;

/// Training precision for all model math.
pub type Real = f32;

pub type FeatureGrid32 = FeatureGrid<f32>;
pub type FeatureGrid64 = FeatureGrid<f64>;
