//! Cheap stand-ins for the trained networks, for tests and benchmarks of
//! the sampler machinery.

use candle_core::{DType, Device, Tensor};

use crate::denoiser::attention::AttentionPolicy;
use crate::denoiser::{LatentCodec, NoisePredictor, PromptTokens};
use crate::io::ImageRgb;
use crate::pilot::mask::BinaryMask;
use crate::schedule::{Schedule, ScheduleSpec};
use crate::{Error, Real, Result};

/// `eps_u = sqrt(1 - ab_t) z`, the exact posterior mean of the noise when
/// clean latents are standard normal, and `eps_c = 1.1 eps_u + b(prompt)`.
/// Linear in the latent, so gradients are exact and cheap.
pub struct LinearPredictor {
    pub dims: (usize, usize, usize),
    pub dtype: DType,
    pub trained: bool,
    alpha_bars: Vec<f64>,
}

impl LinearPredictor {
    pub fn new<T: Real>(dims: (usize, usize, usize)) -> Self {
        let s = Schedule::<f64>::new(ScheduleSpec::default()).expect("default schedule is valid");
        Self {
            dims,
            dtype: T::DTYPE,
            trained: true,
            alpha_bars: s.alpha_bars().to_vec(),
        }
    }

    fn bias(&self, prompt: &PromptTokens) -> Result<Tensor> {
        let (c, h, w) = self.dims;
        let seed: u32 = prompt.ids.iter().fold(7, |a, &b| a.wrapping_mul(31).wrapping_add(b));
        let data: Vec<f64> = (0..c * h * w)
            .map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f64 / 1000.0 - 0.5)
            .collect();
        Ok(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu)?.to_dtype(self.dtype)?)
    }
}

impl NoisePredictor for LinearPredictor {
    fn dtype(&self) -> DType {
        self.dtype
    }

    fn latent_dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    fn predict_pair(
        &self,
        zt: &Tensor,
        t: usize,
        prompt: &PromptTokens,
        _md: Option<&BinaryMask>,
        _policy: &AttentionPolicy,
        _trajectory_fraction: f64,
    ) -> Result<(Tensor, Tensor)> {
        let ab = self.alpha_bars.get(t).copied().ok_or(Error::Timestep { t, len: self.alpha_bars.len() })?;
        let eu = (zt * (1.0 - ab).sqrt())?;
        let ec = if prompt.is_null() {
            eu.clone()
        } else {
            (&eu * 1.1)?.broadcast_add(&self.bias(prompt)?)?
        };
        Ok((eu, ec))
    }

    fn is_trained(&self) -> bool {
        self.trained
    }

    fn fingerprint(&self) -> Option<String> {
        Some("linear".into())
    }
}

/// Average pooling encoder and nearest-neighbour decoder over the three
/// colour channels.
pub struct PoolCodec {
    pub factor: usize,
    pub dtype: DType,
}

impl PoolCodec {
    pub fn new<T: Real>(factor: usize) -> Self {
        Self { factor, dtype: T::DTYPE }
    }
}

impl LatentCodec for PoolCodec {
    fn factor(&self) -> usize {
        self.factor
    }

    fn latent_channels(&self) -> usize {
        3
    }

    fn encode(&self, image: &ImageRgb) -> Result<Tensor> {
        let x = image.to_tensor::<f32>()?;
        let f = self.factor;
        Ok(x.avg_pool2d((f, f))?.to_dtype(self.dtype)?)
    }

    fn decode(&self, z: &Tensor) -> Result<ImageRgb> {
        let (_, _, h, w) = z.dims4()?;
        let up = z.to_dtype(DType::F32)?.upsample_nearest2d(h * self.factor, w * self.factor)?;
        ImageRgb::from_tensor(&up)
    }

    fn is_trained(&self) -> bool {
        true
    }

    fn fingerprint(&self) -> Option<String> {
        Some(format!("pool-{}", self.factor))
    }
}
