//! Deterministic convolutional autoencoder, `3x64x64 <-> 4x16x16`.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{LatentCodec, TrainInfo};
use crate::io::ImageRgb;
use crate::nn::layers::{silu, upsample2x, Conv2d};
use crate::nn::params::{Checkpoint, Params};
use crate::rng::JobRng;
use crate::{Error, Real, Result};

pub const CHECKPOINT_KIND: &str = "autoencoder";
/// Key in [`TrainInfo::metrics`] holding the latent normalization factor.
pub const LATENT_SCALE: &str = "latent_scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub image_channels: usize,
    pub latent_channels: usize,
    /// Widths at full, half and quarter resolution.
    pub widths: [usize; 3],
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            latent_channels: 4,
            widths: [16, 32, 64],
        }
    }
}

impl AutoencoderConfig {
    pub fn tiny() -> Self {
        Self {
            widths: [8, 8, 8],
            ..Self::default()
        }
    }
}

pub struct Autoencoder<T: Real> {
    config: AutoencoderConfig,
    params: Params<T>,
    info: TrainInfo,
    fingerprint: Option<String>,
    encoder: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
}

pub const FACTOR: usize = 4;

impl<T: Real> Autoencoder<T> {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    pub fn new_frozen(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    fn build(config: AutoencoderConfig, seed: u64, frozen: bool) -> Result<Self> {
        let mut params = if frozen { Params::<T>::frozen() } else { Params::<T>::default() };
        let mut rng = JobRng::new(seed);
        let mut pb = params.builder(&mut rng);
        let [w0, w1, w2] = config.widths;
        let (ci, cl) = (config.image_channels, config.latent_channels);
        let encoder = vec![
            Conv2d::new(&mut pb.sub("enc.0"), ci, w0, 3, 1)?,
            Conv2d::new(&mut pb.sub("enc.1"), w0, w1, 3, 2)?,
            Conv2d::new(&mut pb.sub("enc.2"), w1, w2, 3, 2)?,
            Conv2d::new(&mut pb.sub("enc.3"), w2, w2, 3, 1)?,
            Conv2d::new(&mut pb.sub("enc.4"), w2, cl, 3, 1)?,
        ];
        let decoder = vec![
            Conv2d::new(&mut pb.sub("dec.0"), cl, w2, 3, 1)?,
            Conv2d::new(&mut pb.sub("dec.1"), w2, w2, 3, 1)?,
            Conv2d::new(&mut pb.sub("dec.2"), w2, w1, 3, 1)?,
            Conv2d::new(&mut pb.sub("dec.3"), w1, w0, 3, 1)?,
            Conv2d::new(&mut pb.sub("dec.4"), w0, ci, 3, 1)?,
        ];
        let mut info = TrainInfo::default();
        info.metrics.insert(LATENT_SCALE.into(), 1.0);
        Ok(Self {
            config,
            params,
            info,
            fingerprint: None,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn info(&self) -> &TrainInfo {
        &self.info
    }

    pub fn set_info(&mut self, info: TrainInfo) {
        self.info = info;
    }

    pub fn latent_scale(&self) -> f64 {
        self.info.metrics.get(LATENT_SCALE).copied().unwrap_or(1.0)
    }

    pub fn set_latent_scale(&mut self, s: f64) {
        self.info.metrics.insert(LATENT_SCALE.into(), s);
    }

    /// Unscaled encoder output, `(B, 3, H, W) -> (B, C, H/4, W/4)`.
    pub fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.encoder.len() - 1;
        let mut h = x.clone();
        for (i, conv) in self.encoder.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last {
                h = silu(&h)?;
            }
        }
        Ok(h)
    }

    /// Decoder on an unscaled latent.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.clone();
        for (i, conv) in self.decoder.iter().enumerate() {
            if i == 2 || i == 3 {
                h = upsample2x(&h)?;
            }
            h = conv.forward(&h)?;
            if i + 1 < self.decoder.len() {
                h = silu(&h)?;
            }
        }
        Ok(h)
    }

    /// Normalized latents (unit variance on the training set).
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok((self.encode_raw(x)? * self.latent_scale())?)
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.decode_raw(&(z / self.latent_scale())?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.info, self.params.tensors())
    }

    pub fn save(&mut self, path: &Path) -> Result<String> {
        let sha = self.checkpoint()?.save(path)?;
        self.fingerprint = Some(sha.clone());
        Ok(sha)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ckpt, sha) = Checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut m = Self::from_checkpoint(&ckpt)?;
        m.fingerprint = Some(sha);
        Ok(m)
    }

    /// Loaded models are frozen.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new_frozen(ckpt.config()?, 0)?;
        m.params.assign(&ckpt.tensors)?;
        m.info = ckpt.info()?;
        Ok(m)
    }
}

impl<T: Real> LatentCodec for Autoencoder<T> {
    fn factor(&self) -> usize {
        FACTOR
    }

    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn encode(&self, image: &ImageRgb) -> Result<Tensor> {
        if !image.height.is_multiple_of(FACTOR) || !image.width.is_multiple_of(FACTOR) {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by {FACTOR}",
                image.height, image.width
            )));
        }
        self.encode_batch(&image.to_tensor::<T>()?)
    }

    fn decode(&self, z: &Tensor) -> Result<ImageRgb> {
        ImageRgb::from_tensor(&self.decode_batch(&z.to_dtype(T::DTYPE)?)?)
    }

    fn is_trained(&self) -> bool {
        self.info.trained
    }

    fn fingerprint(&self) -> Option<String> {
        self.fingerprint.clone()
    }
}
