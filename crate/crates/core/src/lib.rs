//! Spectral-shift fine-tuning (SVD-reparameterized query weights with a
//! singular-value-weighted shift penalty) together with a desk-scale
//! text-conditioned video diffusion testbed for exercising it.

pub mod attention;
pub mod checkpoint;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod linalg;
pub mod lsg;
pub mod model;
pub mod spectral;

pub use error::{Error, Result};
pub use linalg::{Matrix, SvdResult};
