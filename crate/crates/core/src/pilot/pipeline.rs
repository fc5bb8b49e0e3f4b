use std::time::Instant;

use candle_core::Tensor;

use super::blend::{blend_step, Blended};
use super::guidance::cfg_combine;
use super::mask::{BinaryMask, MaskPair};
use super::optimize::{optimize_latent, OptContext, OptEvent, OptOutcome, StageTrace};
use super::params::PilotParams;
use crate::denoiser::{LatentCodec, NoisePredictor, PromptTokens};
use crate::io::{contact_sheet, ImageRgb};
use crate::record::{image_sha, mask_sha, InputRefs, MaskSummary, ModelRefs, RunRecord, Timings, SCHEMA_VERSION};
use crate::rng::JobRng;
use crate::schedule::{ddim_step, one_step_recon, Schedule, Step};
use crate::{Error, Real, Result};

/// Hooks into the sampling loop. Every method has a no-op default.
pub trait SamplerObserver {
    fn on_event(&mut self, _event: &OptEvent) {}

    /// Called after sampling index `i` produced `z`.
    fn on_step(&mut self, _i: usize, _t: usize, _z: &Tensor) {}

    fn on_blend(&mut self, _i: usize, _step: Step, _blended: &Blended) {}

    /// Polled once per sampling index; returning true aborts with
    /// [`Error::Cancelled`].
    fn cancelled(&self) -> bool {
        false
    }
}

pub struct NoObserver;

impl SamplerObserver for NoObserver {}

/// Decoded reconstructions at one optimization event, after its update.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step_index: usize,
    pub z0u: ImageRgb,
    pub z0c: ImageRgb,
    pub z0_star: ImageRgb,
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    /// Generated pixels inside the mask, input pixels outside.
    pub output: ImageRgb,
    /// Decoded final latent, clamped but not composited.
    pub raw: ImageRgb,
    pub final_latent: Tensor,
    pub record: RunRecord,
    pub snapshots: Vec<Snapshot>,
}

impl InpaintResult {
    /// One row per snapshot: unconditional, conditional, guided.
    pub fn contact_sheet(&self) -> Option<ImageRgb> {
        if self.snapshots.is_empty() {
            return None;
        }
        let rows: Vec<Vec<ImageRgb>> = self
            .snapshots
            .iter()
            .map(|s| vec![s.z0u.clone(), s.z0c.clone(), s.z0_star.clone()])
            .collect();
        contact_sheet(&rows).ok()
    }
}

pub struct Pipeline<'a, T: Real> {
    pub model: &'a dyn NoisePredictor,
    pub codec: &'a dyn LatentCodec,
    pub schedule: &'a Schedule<T>,
}

impl<'a, T: Real> Pipeline<'a, T> {
    pub fn new(model: &'a dyn NoisePredictor, codec: &'a dyn LatentCodec, schedule: &'a Schedule<T>) -> Self {
        Self { model, codec, schedule }
    }

    fn check(&self, image: &ImageRgb, m: &BinaryMask, params: &PilotParams) -> Result<()> {
        params.validate()?;
        if !self.model.is_trained() {
            return Err(Error::Untrained("denoiser".into()));
        }
        if !self.codec.is_trained() {
            return Err(Error::Untrained("autoencoder".into()));
        }
        if self.model.dtype() != T::DTYPE {
            return Err(Error::InvalidArgument(format!(
                "denoiser is {:?}, sampler runs in {:?}",
                self.model.dtype(),
                T::DTYPE
            )));
        }
        if (image.height, image.width) != (m.height, m.width) {
            return Err(Error::Shape(format!(
                "image {}x{} vs mask {}x{}",
                image.height, image.width, m.height, m.width
            )));
        }
        let f = self.codec.factor();
        let (c, h, w) = self.model.latent_dims();
        if image.height != h * f || image.width != w * f || self.codec.latent_channels() != c {
            return Err(Error::Shape(format!(
                "image {}x{} does not map onto the {c}x{h}x{w} latent (factor {f})",
                image.height, image.width
            )));
        }
        if params.n_steps > self.schedule.t_train() {
            return Err(Error::InvalidArgument(format!(
                "n_steps {} exceeds the {}-step schedule",
                params.n_steps,
                self.schedule.t_train()
            )));
        }
        Ok(())
    }

    fn snapshot(&self, i: usize, z0u: &Tensor, z0c: &Tensor, z0s: &Tensor) -> Result<Snapshot> {
        Ok(Snapshot {
            step_index: i,
            z0u: self.codec.decode(z0u)?.clamped(),
            z0c: self.codec.decode(z0c)?.clamped(),
            z0_star: self.codec.decode(z0s)?.clamped(),
        })
    }

    /// Fill the masked region of `image` according to `prompt`.
    pub fn inpaint(
        &self,
        image: &ImageRgb,
        m: &BinaryMask,
        prompt: &PromptTokens,
        params: &PilotParams,
        observer: &mut dyn SamplerObserver,
    ) -> Result<InpaintResult> {
        let started = Instant::now();
        self.check(image, m, params)?;
        let pair = MaskPair::new(m.clone(), self.codec.factor())?;
        let md = &pair.md;
        let z_in = self.codec.encode(image)?.to_dtype(T::DTYPE)?;
        let plan = self.schedule.plan(params.n_steps)?;
        let mut rng = JobRng::new(params.seed);
        let mut z = rng.normal_tensor::<T, _>(z_in.dims())?;

        let n_opt = params.optimization_steps();
        let ctx = OptContext {
            model: self.model,
            schedule: self.schedule,
            prompt,
            z_in: &z_in,
            md,
            params,
        };
        let mut trace = StageTrace {
            optimization_steps: n_opt,
            n_steps: params.n_steps,
            events: Vec::new(),
        };
        let mut snapshots = Vec::new();
        let mut opt_time = 0.0;
        let mut lr_scale = 1.0;

        for i in 0..params.n_steps {
            if observer.cancelled() {
                return Err(Error::Cancelled);
            }
            let t = plan.t(i);
            let frac = plan.fraction(i);
            let prev = plan.prev(i);

            let mut recon = None;
            if params.is_event(i) {
                let t0 = Instant::now();
                let (outcome, event) = optimize_latent(&z, t, i, frac, &ctx, &mut lr_scale)?;
                opt_time += t0.elapsed().as_secs_f64();
                observer.on_event(&event);
                trace.events.push(event);
                match outcome {
                    OptOutcome::Latent(zo) => z = zo,
                    OptOutcome::Reconstructions { z0u, z0c } => recon = Some((z0u, z0c)),
                }
            }
            let (z0u, z0c) = match recon {
                Some(pair) => pair,
                None => {
                    let (eu, ec) = self.model.predict_pair(&z, t, prompt, Some(md), &params.attention, frac)?;
                    (one_step_recon(&z, &eu, t, self.schedule)?, one_step_recon(&z, &ec, t, self.schedule)?)
                }
            };
            let z0_star = cfg_combine(&z0u, &z0c, params.omega)?;
            if params.snapshots && params.is_event(i) {
                snapshots.push(self.snapshot(i, &z0u, &z0c, &z0_star)?);
            }
            let mut next = ddim_step(&z, &z0_star, t, prev, self.schedule)?;
            if i >= n_opt {
                let blended = blend_step(&next, &z_in, prev, md, &mut rng, self.schedule)?;
                observer.on_blend(i, prev, &blended);
                next = blended.z;
            }
            observer.on_step(i, t, &next);
            z = next;
        }
        let sampling_done = Instant::now();

        let raw = self.codec.decode(&z)?.clamped();
        let output = raw.composite(image, m)?;
        let decode_s = sampling_done.elapsed().as_secs_f64();
        let total_s = started.elapsed().as_secs_f64();

        let record = RunRecord {
            schema_version: SCHEMA_VERSION,
            created_at: chrono::Utc::now().to_rfc3339(),
            prompt: prompt.caption(),
            prompt_ids: prompt.ids,
            params: params.clone(),
            schedule: self.schedule.spec().clone(),
            precision: T::DTYPE.as_str().to_string(),
            models: ModelRefs {
                denoiser: self.model.fingerprint(),
                autoencoder: self.codec.fingerprint(),
            },
            inputs: InputRefs {
                image_sha256: image_sha(image)?,
                mask_sha256: mask_sha(m)?,
                height: image.height,
                width: image.width,
            },
            mask: MaskSummary {
                masked_fraction: m.masked_fraction(),
                latent_masked_fraction: md.masked_fraction(),
                degenerate: pair.is_degenerate(),
            },
            output_sha256: image_sha(&output)?,
            trace,
            metrics: None,
            timings: Timings {
                total_s,
                optimization_s: opt_time,
                sampling_s: total_s - decode_s - opt_time,
                decode_s,
            },
        };
        Ok(InpaintResult {
            output,
            raw,
            final_latent: z,
            record,
            snapshots,
        })
    }
}

/// One-call form of [`Pipeline::inpaint`] without an observer.
pub fn pilot_inpaint<T: Real>(
    model: &dyn NoisePredictor,
    codec: &dyn LatentCodec,
    schedule: &Schedule<T>,
    image: &ImageRgb,
    m: &BinaryMask,
    prompt: &PromptTokens,
    params: &PilotParams,
) -> Result<InpaintResult> {
    Pipeline::new(model, codec, schedule).inpaint(image, m, prompt, params, &mut NoObserver)
}
