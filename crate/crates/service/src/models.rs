use std::path::Path;

use anyhow::{bail, Context};
use pilot_core::denoiser::autoencoder::Autoencoder;
use pilot_core::denoiser::unet::DenoiserModel;
use pilot_core::denoiser::{LatentCodec, NoisePredictor, PromptTokens};
use pilot_core::eval::oracle::Oracle;
use pilot_core::io::ImageRgb;
use pilot_core::pilot::pipeline::{InpaintResult, Pipeline, SamplerObserver};
use pilot_core::pilot::{BinaryMask, PilotParams};
use pilot_core::schedule::ScheduleSpec;
use pilot_core::{Schedule32, Schedule64};

use crate::config::Config;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Anything that can execute an inpainting job.
pub trait Engine: Send + Sync {
    fn inpaint(
        &self,
        image: &ImageRgb,
        m: &BinaryMask,
        prompt: &PromptTokens,
        params: &PilotParams,
        observer: &mut dyn SamplerObserver,
    ) -> pilot_core::Result<InpaintResult>;

    fn image_size(&self) -> (usize, usize);
}

/// Trained networks loaded from checkpoints.
pub struct Models {
    pub denoiser: DenoiserModel<f32>,
    pub denoiser64: Option<DenoiserModel<f64>>,
    pub autoencoder: Autoencoder<f32>,
    pub oracle: Option<Oracle<f32>>,
    pub schedule: Schedule32,
    pub schedule64: Schedule64,
    pub precision: Precision,
}

fn load_denoiser(path: &Path) -> anyhow::Result<DenoiserModel<f32>> {
    let m = DenoiserModel::<f32>::load(path).with_context(|| format!("loading denoiser {}", path.display()))?;
    if !m.info().trained {
        bail!("denoiser checkpoint {} is untrained", path.display());
    }
    Ok(m)
}

fn load_autoencoder(path: &Path) -> anyhow::Result<Autoencoder<f32>> {
    let ae = Autoencoder::<f32>::load(path).with_context(|| format!("loading autoencoder {}", path.display()))?;
    if !ae.info().trained {
        bail!("autoencoder checkpoint {} is untrained", path.display());
    }
    Ok(ae)
}

pub fn load_oracle(path: &Path) -> anyhow::Result<Oracle<f32>> {
    let o = Oracle::<f32>::load(path).with_context(|| format!("loading oracle {}", path.display()))?;
    if !o.info().trained {
        bail!("oracle checkpoint {} is untrained", path.display());
    }
    Ok(o)
}

impl Models {
    /// Denoiser and autoencoder are required; the oracle is optional.
    pub fn load(config: &Config, precision: Precision) -> anyhow::Result<Self> {
        let denoiser = load_denoiser(&config.denoiser)?;
        let autoencoder = load_autoencoder(&config.autoencoder)?;
        let oracle = if config.oracle.exists() { Some(load_oracle(&config.oracle)?) } else { None };
        let denoiser64 = match precision {
            Precision::F64 => Some(denoiser.to_dtype::<f64>()?),
            Precision::F32 => None,
        };
        Ok(Self {
            denoiser,
            denoiser64,
            autoencoder,
            oracle,
            schedule: Schedule32::new(ScheduleSpec::default())?,
            schedule64: Schedule64::new(ScheduleSpec::default())?,
            precision,
        })
    }
}

impl Engine for Models {
    fn inpaint(
        &self,
        image: &ImageRgb,
        m: &BinaryMask,
        prompt: &PromptTokens,
        params: &PilotParams,
        observer: &mut dyn SamplerObserver,
    ) -> pilot_core::Result<InpaintResult> {
        match &self.denoiser64 {
            Some(d) => Pipeline::new(d, &self.autoencoder, &self.schedule64).inpaint(image, m, prompt, params, observer),
            None => Pipeline::new(&self.denoiser, &self.autoencoder, &self.schedule).inpaint(image, m, prompt, params, observer),
        }
    }

    fn image_size(&self) -> (usize, usize) {
        let (_, h, w) = self.denoiser.latent_dims();
        let f = self.autoencoder.factor();
        (h * f, w * f)
    }
}

/// Engine over arbitrary predictor and codec objects, used with the
/// stand-ins in tests.
pub struct DynEngine<P, C> {
    pub model: P,
    pub codec: C,
    pub schedule: Schedule32,
}

impl<P: NoisePredictor, C: LatentCodec> Engine for DynEngine<P, C> {
    fn inpaint(
        &self,
        image: &ImageRgb,
        m: &BinaryMask,
        prompt: &PromptTokens,
        params: &PilotParams,
        observer: &mut dyn SamplerObserver,
    ) -> pilot_core::Result<InpaintResult> {
        Pipeline::new(&self.model, &self.codec, &self.schedule).inpaint(image, m, prompt, params, observer)
    }

    fn image_size(&self) -> (usize, usize) {
        let (_, h, w) = self.model.latent_dims();
        (h * self.codec.factor(), w * self.codec.factor())
    }
}
