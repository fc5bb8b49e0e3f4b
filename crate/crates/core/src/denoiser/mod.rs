//! The trainable toy stack: dataset, autoencoder, conditional U-Net and
//! the training loops.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::io::ImageRgb;
use crate::pilot::mask::BinaryMask;
use crate::Result;

pub mod attention;
pub mod autoencoder;
pub mod dataset;
pub mod prompt;
pub mod train;
pub mod unet;

pub use attention::AttentionPolicy;
pub use prompt::PromptTokens;

/// Training provenance stored alongside the weights in a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainInfo {
    pub trained: bool,
    pub seed: u64,
    pub dataset_size: usize,
    pub epochs: usize,
    pub steps: usize,
    pub seconds: f64,
    /// Named scalar results such as held-out losses.
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

/// Anything that predicts noise for the unconditional and conditional
/// branches of one latent.
pub trait NoisePredictor: Send + Sync {
    fn dtype(&self) -> DType;

    /// `(channels, height, width)` of the latent.
    fn latent_dims(&self) -> (usize, usize, usize);

    /// `zt` is `(1, C, H, W)`; returns `(eps_uncond, eps_cond)`, each of the
    /// same shape, differentiable with respect to `zt`.
    fn predict_pair(
        &self,
        zt: &Tensor,
        t: usize,
        prompt: &PromptTokens,
        md: Option<&BinaryMask>,
        policy: &AttentionPolicy,
        trajectory_fraction: f64,
    ) -> Result<(Tensor, Tensor)>;

    fn is_trained(&self) -> bool;

    fn fingerprint(&self) -> Option<String> {
        None
    }
}

/// Image to latent and back.
pub trait LatentCodec: Send + Sync {
    /// Spatial downsampling factor between pixels and latent cells.
    fn factor(&self) -> usize;

    fn latent_channels(&self) -> usize;

    /// `(1, C, H / factor, W / factor)` latent in the codec's own dtype.
    fn encode(&self, image: &ImageRgb) -> Result<Tensor>;

    /// Accepts a `(1, C, h, w)` latent of any float dtype.
    fn decode(&self, z: &Tensor) -> Result<ImageRgb>;

    fn is_trained(&self) -> bool;

    fn fingerprint(&self) -> Option<String> {
        None
    }
}
