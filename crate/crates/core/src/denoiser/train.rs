//! Training loops for the autoencoder and the noise predictor.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use super::attention::AttentionPolicy;
use super::autoencoder::Autoencoder;
use super::dataset::{stack_images, ToyImage};
use super::prompt::PromptTokens;
use super::unet::DenoiserModel;
use super::{LatentCodec, TrainInfo};
use crate::io::ImageRgb;
use crate::rng::JobRng;
use crate::schedule::Schedule;
use crate::{Error, Real, Result};

/// Per-step training losses plus one held-out loss per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub steps: Vec<f64>,
    pub validation: Vec<f64>,
}

impl LossHistory {
    /// Mean of the first and last `window` step losses.
    pub fn endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.steps.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..w]), mean(&self.steps[n - w..])))
    }
}

pub(crate) fn scalar(loss: &Tensor) -> Result<f64> {
    Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub(crate) fn ensure_finite(loss: f64, step: usize, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("{what} loss became {loss} at step {step}")));
    }
    Ok(())
}

/// Linear warm-up, then cosine decay to a tenth of the peak.
pub(crate) fn lr_at(step: usize, total: usize, peak: f64, warmup: usize) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let p = ((step - warmup) as f64 / span).min(1.0);
    peak * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

pub(crate) fn batches(rng: &mut JobRng, n: usize, batch: usize) -> Vec<Vec<u32>> {
    let mut order: Vec<u32> = (0..n as u32).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(<[u32]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out mean absolute error the run is expected to reach.
    pub target_mae: f64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch: 32,
            lr: 2e-3,
            seed: 0,
            target_mae: 0.05,
        }
    }
}

/// Reconstruction errors of `ae` on `images`: `(mean abs, mean squared)`.
pub fn reconstruction_error<T: Real>(ae: &Autoencoder<T>, images: &[ToyImage]) -> Result<(f64, f64)> {
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for chunk in images.chunks(64) {
        let refs: Vec<&ImageRgb> = chunk.iter().map(|i| &i.pixels).collect();
        let x = stack_images::<T>(&refs)?;
        let r = ae.decode_raw(&ae.encode_raw(&x)?)?;
        let d = (r - &x)?;
        abs += scalar(&d.abs()?.sum_all()?)?;
        sq += scalar(&d.sqr()?.sum_all()?)?;
        n += x.elem_count();
    }
    Ok((abs / n as f64, sq / n as f64))
}

pub fn train_autoencoder<T: Real>(
    ae: &mut Autoencoder<T>,
    train: &[ToyImage],
    val: &[ToyImage],
    cfg: &AutoencoderTrainConfig,
) -> Result<LossHistory> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let start = Instant::now();
    let mut rng = JobRng::derived(cfg.seed, 11);
    let mut opt = AdamW::new(
        ae.params().vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let per_epoch = train.len().div_ceil(cfg.batch);
    let total = per_epoch * cfg.epochs;
    let mut history = LossHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in batches(&mut rng, train.len(), cfg.batch) {
            let refs: Vec<&ImageRgb> = idx.iter().map(|&i| &train[i as usize].pixels).collect();
            let x = stack_images::<T>(&refs)?;
            let d = (ae.decode_raw(&ae.encode_raw(&x)?)? - &x)?;
            let loss = (d.abs()?.mean_all()? + d.sqr()?.mean_all()?)?;
            let l = scalar(&loss)?;
            ensure_finite(l, step, "autoencoder")?;
            opt.set_learning_rate(lr_at(step, total, cfg.lr, total / 20));
            opt.backward_step(&loss)?;
            history.steps.push(l);
            step += 1;
        }
        if !val.is_empty() {
            let (mae, _) = reconstruction_error(ae, val)?;
            tracing::info!(epoch, mae, "autoencoder epoch");
            history.validation.push(mae);
        }
    }

    // Normalize latents to unit variance over (a sample of) the training set.
    let sample: Vec<&ImageRgb> = train.iter().take(512).map(|i| &i.pixels).collect();
    let mut sum_sq = 0.0;
    let mut count = 0;
    for chunk in sample.chunks(64) {
        let z = ae.encode_raw(&stack_images::<T>(chunk)?)?;
        sum_sq += scalar(&z.sqr()?.sum_all()?)?;
        count += z.elem_count();
    }
    let rms = (sum_sq / count as f64).sqrt();
    let mut info = TrainInfo {
        trained: true,
        seed: cfg.seed,
        dataset_size: train.len(),
        epochs: cfg.epochs,
        steps: step,
        seconds: start.elapsed().as_secs_f64(),
        metrics: Default::default(),
    };
    if !val.is_empty() {
        let (mae, mse) = reconstruction_error(ae, val)?;
        info.metrics.insert("val_mae".into(), mae);
        info.metrics.insert("val_mse".into(), mse);
        if mae > cfg.target_mae {
            tracing::warn!(mae, target = cfg.target_mae, "autoencoder missed its reconstruction target");
        }
    }
    ae.set_info(info);
    ae.set_latent_scale(if rms > 0.0 { 1.0 / rms } else { 1.0 });
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub cond_drop_prob: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch: 64,
            lr: 2e-3,
            cond_drop_prob: 0.1,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl DenoiserTrainConfig {
    pub fn smoke() -> Self {
        Self {
            epochs: 2,
            batch: 32,
            ..Self::default()
        }
    }
}

/// Encode every image once; the encoder is deterministic.
pub fn encode_all<T: Real>(codec: &dyn LatentCodec, images: &[ToyImage]) -> Result<Tensor> {
    let latents = images
        .iter()
        .map(|i| Ok(codec.encode(&i.pixels)?.to_dtype(T::DTYPE)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&latents, 0)?)
}

fn noise_batch<T: Real>(
    z0: &Tensor,
    ts: &[usize],
    rng: &mut JobRng,
    schedule: &Schedule<T>,
) -> Result<(Tensor, Tensor)> {
    let b = ts.len();
    let eps = rng.normal_tensor::<T, _>(z0.dims())?;
    let mut sa = Vec::with_capacity(b);
    let mut sb = Vec::with_capacity(b);
    for &t in ts {
        let ab = schedule.alpha_bar(t)?;
        sa.push(ab.sqrt());
        sb.push((T::one() - ab).sqrt());
    }
    let sa = Tensor::from_vec(sa, (b, 1, 1, 1), &Device::Cpu)?;
    let sb = Tensor::from_vec(sb, (b, 1, 1, 1), &Device::Cpu)?;
    let zt = (z0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?;
    Ok((zt, eps))
}

/// Held-out epsilon-prediction loss with fixed timesteps and noise.
pub fn validation_loss<T: Real>(
    model: &DenoiserModel<T>,
    latents: &Tensor,
    prompts: &[PromptTokens],
    schedule: &Schedule<T>,
    seed: u64,
) -> Result<f64> {
    let n = latents.dim(0)?;
    let mut rng = JobRng::derived(seed, 13);
    let (mut total, mut count) = (0.0, 0);
    let policy = AttentionPolicy::none();
    for start in (0..n).step_by(64) {
        let len = 64.min(n - start);
        let z0 = latents.narrow(0, start, len)?;
        let ts: Vec<usize> = (0..len).map(|_| rng.below(schedule.t_train())).collect();
        let (zt, eps) = noise_batch(&z0, &ts, &mut rng, schedule)?;
        let pred = model.forward(&zt, &ts, &prompts[start..start + len], None, &policy, 0.0, None)?;
        total += scalar(&(pred - eps)?.sqr()?.sum_all()?)?;
        count += z0.elem_count();
    }
    Ok(total / count as f64)
}

/// Classifier-free epsilon-prediction training.
pub fn train_denoiser<T: Real>(
    model: &mut DenoiserModel<T>,
    codec: &dyn LatentCodec,
    train: &[ToyImage],
    val: &[ToyImage],
    cfg: &DenoiserTrainConfig,
    schedule: &Schedule<T>,
) -> Result<LossHistory> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if !(0.0..=1.0).contains(&cfg.cond_drop_prob) {
        return Err(Error::InvalidArgument(format!(
            "cond_drop_prob must be in [0, 1], got {}",
            cfg.cond_drop_prob
        )));
    }
    if !codec.is_trained() {
        return Err(Error::Untrained("autoencoder".into()));
    }
    let start = Instant::now();
    let latents = encode_all::<T>(codec, train)?;
    let prompts: Vec<PromptTokens> = train.iter().map(|i| PromptTokens::for_label(i.label)).collect();
    let val_latents = if val.is_empty() { None } else { Some(encode_all::<T>(codec, val)?) };
    let val_prompts: Vec<PromptTokens> = val.iter().map(|i| PromptTokens::for_label(i.label)).collect();

    let mut rng = JobRng::derived(cfg.seed, 12);
    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let policy = AttentionPolicy::none();
    let per_epoch = train.len().div_ceil(cfg.batch);
    let total = per_epoch * cfg.epochs;
    let mut history = LossHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in batches(&mut rng, train.len(), cfg.batch) {
            let ids = Tensor::from_vec(idx.clone(), idx.len(), &Device::Cpu)?;
            let z0 = latents.index_select(&ids, 0)?;
            let ts: Vec<usize> = idx.iter().map(|_| rng.below(schedule.t_train())).collect();
            let (zt, eps) = noise_batch(&z0, &ts, &mut rng, schedule)?;
            let batch_prompts: Vec<PromptTokens> = idx
                .iter()
                .map(|&i| {
                    if rng.bernoulli(cfg.cond_drop_prob) {
                        PromptTokens::null()
                    } else {
                        prompts[i as usize]
                    }
                })
                .collect();
            let pred = model.forward(&zt, &ts, &batch_prompts, None, &policy, 0.0, None)?;
            let loss = (pred - eps)?.sqr()?.mean_all()?;
            let l = scalar(&loss)?;
            ensure_finite(l, step, "denoiser")?;
            opt.set_learning_rate(lr_at(step, total, cfg.lr, (total / 20).min(500)));
            opt.backward_step(&loss)?;
            history.steps.push(l);
            if step % 100 == 0 {
                tracing::info!(epoch, step, loss = l, "denoiser step");
            }
            step += 1;
        }
        if let Some(vl) = &val_latents {
            let v = validation_loss(model, vl, &val_prompts, schedule, cfg.seed)?;
            tracing::info!(epoch, val_loss = v, "denoiser epoch");
            history.validation.push(v);
        }
    }
    let mut info = TrainInfo {
        trained: true,
        seed: cfg.seed,
        dataset_size: train.len(),
        epochs: cfg.epochs,
        steps: step,
        seconds: start.elapsed().as_secs_f64(),
        metrics: Default::default(),
    };
    if let Some(v) = history.validation.last() {
        info.metrics.insert("val_loss".into(), *v);
    }
    if let Some((_, last)) = history.endpoints(50) {
        info.metrics.insert("train_loss".into(), last);
    }
    model.set_info(info);
    Ok(history)
}
