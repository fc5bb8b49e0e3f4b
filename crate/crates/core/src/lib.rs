//! PILOT-style inpainting on a small latent diffusion model.
//!
//! The crate holds the noise schedule, the trainable toy stack (dataset,
//! autoencoder, conditional U-Net), the two-stage sampler and the
//! evaluation harness. Numeric code is generic over [`Real`]; the aliases
//! below fix the two precisions that are actually used.

pub mod denoiser;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod pilot;
pub mod real;
pub mod record;
pub mod rng;
pub mod schedule;
pub mod testing;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::JobRng;

pub type Schedule32 = schedule::Schedule<f32>;
pub type Schedule64 = schedule::Schedule<f64>;
pub type Denoiser32 = denoiser::unet::DenoiserModel<f32>;
pub type Denoiser64 = denoiser::unet::DenoiserModel<f64>;
pub type Autoencoder32 = denoiser::autoencoder::Autoencoder<f32>;
pub type Autoencoder64 = denoiser::autoencoder::Autoencoder<f64>;
pub type Oracle32 = eval::oracle::Oracle<f32>;
pub type Oracle64 = eval::oracle::Oracle<f64>;
