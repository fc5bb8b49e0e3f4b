//! The two-stage sampler: latent optimization events followed by
//! conditioned sampling with background blending.

pub mod blend;
pub mod guidance;
pub mod loss;
pub mod mask;
pub mod optimize;
pub mod params;
pub mod pipeline;
pub mod schedulers;

pub use mask::{BinaryMask, MaskPair};
pub use params::{OptimizationTarget, PilotParams, StepControl};
pub use pipeline::{pilot_inpaint, InpaintResult, NoObserver, Pipeline, SamplerObserver};
