//! Noise schedule, forward process and the deterministic reverse step.
//!
//! Timesteps are zero-based training indices `0..t_train`. The DDIM update
//! additionally accepts [`Step::Endpoint`], the clean end of the trajectory
//! where the cumulative signal rate is exactly one.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Serializable description of a schedule. Arrays are always recomputed from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(rename = "T_train")]
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            t_train: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

/// A position on the sampling trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    At(usize),
    Endpoint,
}

#[derive(Clone, Debug)]
pub struct Schedule<T> {
    spec: ScheduleSpec,
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Real> Schedule<T> {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec {
            kind,
            t_train,
            beta_min,
            beta_max,
        } = spec;
        if t_train < 2 {
            return Err(Error::Schedule(format!("T_train must be >= 2, got {t_train}")));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas_f64: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..t_train)
                .map(|t| beta_min + (beta_max - beta_min) * t as f64 / (t_train - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let x = (t / t_train as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (0..t_train)
                    .map(|t| (1.0 - f(t as f64 + 1.0) / f(t as f64)).clamp(beta_min, beta_max))
                    .collect()
            }
        };
        let betas: Vec<T> = betas_f64.iter().map(|&b| T::lit(b)).collect();
        let alphas: Vec<T> = betas.iter().map(|&b| T::one() - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(T::one(), |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            spec,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn t_train(&self) -> usize {
        self.spec.t_train
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.t_train() {
            return Err(Error::Timestep {
                t,
                len: self.t_train(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    pub fn alpha_bar_at(&self, step: Step) -> Result<T> {
        match step {
            Step::At(t) => self.alpha_bar(t),
            Step::Endpoint => Ok(T::one()),
        }
    }

    /// Uniformly strided sampling plan of `n_steps` timesteps, from
    /// `t_train - 1` down to `0` inclusive.
    pub fn plan(&self, n_steps: usize) -> Result<TimestepPlan> {
        TimestepPlan::uniform(self.t_train(), n_steps)
    }
}

/// Strictly decreasing subsequence of training timesteps visited by the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimestepPlan {
    pub steps: Vec<usize>,
    pub n_steps: usize,
}

impl TimestepPlan {
    pub fn uniform(t_train: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || n_steps > t_train {
            return Err(Error::InvalidArgument(format!(
                "n_steps must be in 1..={t_train}, got {n_steps}"
            )));
        }
        let steps = if n_steps == 1 {
            vec![t_train - 1]
        } else {
            let span = (t_train - 1) as f64;
            let last = (n_steps - 1) as f64;
            (0..n_steps)
                .map(|i| ((last - i as f64) * span / last).round() as usize)
                .collect()
        };
        Ok(Self { steps, n_steps })
    }

    /// Timestep at sampling index `i`.
    pub fn t(&self, i: usize) -> usize {
        self.steps[i]
    }

    /// The step the sampler moves to after index `i`.
    pub fn prev(&self, i: usize) -> Step {
        match self.steps.get(i + 1) {
            Some(&t) => Step::At(t),
            None => Step::Endpoint,
        }
    }

    /// Fraction of the trajectory already traversed when index `i` starts.
    pub fn fraction(&self, i: usize) -> f64 {
        i as f64 / self.n_steps as f64
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Forward process: `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn q_sample<T: Real>(x0: &Tensor, t: usize, eps: &Tensor, s: &Schedule<T>) -> Result<Tensor> {
    q_sample_at(x0, Step::At(t), eps, s)
}

/// [`q_sample`] that also accepts the clean endpoint, where it returns `x0`.
pub fn q_sample_at<T: Real>(
    x0: &Tensor,
    step: Step,
    eps: &Tensor,
    s: &Schedule<T>,
) -> Result<Tensor> {
    same_shape(x0, eps, "q_sample")?;
    let ab = s.alpha_bar_at(step)?;
    if ab == T::one() {
        return Ok(x0.clone());
    }
    let signal = ab.sqrt().as_f64();
    let noise = (T::one() - ab).sqrt().as_f64();
    Ok(((x0 * signal)? + (eps * noise)?)?)
}

/// One-step reconstruction of the clean latent from `xt` and predicted noise.
pub fn one_step_recon<T: Real>(
    xt: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &Schedule<T>,
) -> Result<Tensor> {
    same_shape(xt, eps_hat, "one_step_recon")?;
    let ab = s.alpha_bar(t)?;
    if ab <= T::zero() {
        return Err(Error::InvalidArgument(format!(
            "alpha_bar[{t}] = 0, reconstruction undefined"
        )));
    }
    if ab == T::one() {
        return Ok(xt.clone());
    }
    let noise = (T::one() - ab).sqrt().as_f64();
    let signal = ab.sqrt().as_f64();
    Ok(((xt - (eps_hat * noise)?)? / signal)?)
}

/// Deterministic DDIM update from `t` to `t_prev` given a clean-latent prediction.
pub fn ddim_step<T: Real>(
    zt: &Tensor,
    z0_pred: &Tensor,
    t: usize,
    t_prev: Step,
    s: &Schedule<T>,
) -> Result<Tensor> {
    same_shape(zt, z0_pred, "ddim_step")?;
    let ab = s.alpha_bar(t)?;
    if let Step::At(tp) = t_prev {
        if tp > t {
            return Err(Error::InvalidArgument(format!(
                "ddim_step must move backwards, got t={t} -> {tp}"
            )));
        }
    }
    let ab_prev = s.alpha_bar_at(t_prev)?;
    if ab_prev == T::one() {
        return Ok(z0_pred.clone());
    }
    if ab >= T::one() {
        return Err(Error::InvalidArgument(format!(
            "alpha_bar[{t}] = 1 at a non-endpoint step, implied noise undefined"
        )));
    }
    let eps = ((zt - (z0_pred * ab.sqrt().as_f64())?)? / (T::one() - ab).sqrt().as_f64())?;
    Ok(((z0_pred * ab_prev.sqrt().as_f64())? + (eps * (T::one() - ab_prev).sqrt().as_f64())?)?)
}

/// DDPM posterior mean `(xt - beta_t / sqrt(1 - ab_t) * eps) / sqrt(alpha_t)`.
pub fn ddpm_mean<T: Real>(
    xt: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &Schedule<T>,
) -> Result<Tensor> {
    same_shape(xt, eps_hat, "ddpm_mean")?;
    s.check(t)?;
    let alpha = s.alphas[t];
    let beta = s.betas[t];
    let coef = beta / (T::one() - s.alpha_bars[t]).sqrt();
    Ok(((xt - (eps_hat * coef.as_f64())?)? / alpha.sqrt().as_f64())?)
}
