//! Conditional denoising-diffusion forecasting for gridded geophysical
//! fields.
//!
//! The pipeline: [`grid`] data are min-max normalised, an [`encoder`] is
//! pretrained as an autoencoder, a cross-attention conditioned U-Net
//! ([`denoiser`]) is trained to predict diffusion noise ([`diffusion`]), and
//! [`forecast`] rolls the sampler forward autoregressively to build
//! ensembles that [`metrics`] scores with latitude-weighted skill.

pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod forecast;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod schedule;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
