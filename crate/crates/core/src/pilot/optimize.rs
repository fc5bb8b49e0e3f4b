//! Inner gradient descent run at each optimization event.

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, LossParts};
use super::params::{OptimizationTarget, PilotParams, StepControl};
use super::schedulers::{lambda_schedule, lr_schedule};
use crate::denoiser::{NoisePredictor, PromptTokens};
use crate::pilot::mask::BinaryMask;
use crate::schedule::{one_step_recon, Schedule};
use crate::{Error, Real, Result};

/// Loss values measured before one inner update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub bg: f64,
    pub sc: f64,
    pub total: f64,
}

/// One optimization event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptEvent {
    pub step_index: usize,
    pub t: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Loss at each accepted iterate, starting with the incoming latent.
    pub losses: Vec<LossValues>,
    pub grad_norms: Vec<f64>,
    /// Steps that would have raised the loss and were retried smaller.
    #[serde(default)]
    pub rejected: usize,
    /// Learning-rate scale in effect when the event ended.
    #[serde(default = "unit")]
    pub lr_scale: f64,
}

fn unit() -> f64 {
    1.0
}

impl OptEvent {
    pub fn first(&self) -> Option<LossValues> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<LossValues> {
        self.losses.last().copied()
    }
}

/// Diagnostics of a whole trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    /// Sampling indices `< optimization_steps` form the optimization stage.
    pub optimization_steps: usize,
    pub n_steps: usize,
    /// Ordered by decreasing timestep.
    pub events: Vec<OptEvent>,
}

/// Result of an event: either an updated noisy latent, or (in the
/// reconstruction mode) the optimized reconstruction pair to step from.
#[derive(Clone, Debug)]
pub enum OptOutcome {
    Latent(Tensor),
    Reconstructions { z0u: Tensor, z0c: Tensor },
}

/// Everything an event needs besides the current latent.
pub struct OptContext<'a, T: Real> {
    pub model: &'a dyn NoisePredictor,
    pub schedule: &'a Schedule<T>,
    pub prompt: &'a PromptTokens,
    pub z_in: &'a Tensor,
    pub md: &'a BinaryMask,
    pub params: &'a PilotParams,
}

fn finite_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn ensure_finite(what: &str, t: usize, k: usize, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} at t={t}, inner step {k}: {v}")));
    }
    Ok(())
}

/// Loss of the noisy latent `z` at timestep `t`, differentiable in `z`.
pub fn event_loss<T: Real>(z: &Tensor, t: usize, trajectory_fraction: f64, ctx: &OptContext<'_, T>) -> Result<LossParts> {
    let p = ctx.params;
    let (eu, ec) = ctx
        .model
        .predict_pair(z, t, ctx.prompt, Some(ctx.md), &p.attention, trajectory_fraction)?;
    let z0u = one_step_recon(z, &eu, t, ctx.schedule)?;
    let z0c = one_step_recon(z, &ec, t, ctx.schedule)?;
    total_loss(&z0u, &z0c, ctx.z_in, ctx.md, lambda_schedule(ctx.md, p.lambda_anchor), p.eps_floor)
}

/// Loss and its gradient with respect to `z`.
pub fn event_gradient<T: Real>(
    z: &Tensor,
    t: usize,
    trajectory_fraction: f64,
    ctx: &OptContext<'_, T>,
) -> Result<(LossParts, Tensor)> {
    let var = Var::from_tensor(&z.detach())?;
    let parts = event_loss(var.as_tensor(), t, trajectory_fraction, ctx)?;
    let grads = parts.total.backward()?;
    let g = match grads.get(var.as_tensor()) {
        Some(g) => g.clone(),
        None => z.zeros_like()?,
    };
    Ok((parts, g))
}

/// Runs `params.inner_steps` gradient steps at timestep `t`. `lr_scale`
/// is the backtracking scale carried from the previous event (start a
/// trajectory with 1) and is updated in place.
pub fn optimize_latent<T: Real>(
    zt: &Tensor,
    t: usize,
    step_index: usize,
    trajectory_fraction: f64,
    ctx: &OptContext<'_, T>,
    lr_scale: &mut f64,
) -> Result<(OptOutcome, OptEvent)> {
    let p = ctx.params;
    let lambda = lambda_schedule(ctx.md, p.lambda_anchor);
    let lr = lr_schedule(t, ctx.schedule.t_train(), p.lr_anchor, p.lr_decay_decades);
    let mut event = OptEvent {
        step_index,
        t,
        lr,
        lambda,
        losses: Vec::with_capacity(p.inner_steps + 1),
        grad_norms: Vec::with_capacity(p.inner_steps + 1),
        rejected: 0,
        lr_scale: 1.0,
    };
    if p.inner_steps == 0 {
        return Ok((OptOutcome::Latent(zt.clone()), event));
    }
    let predict = |z: &Tensor| -> Result<(Tensor, Tensor)> {
        let (eu, ec) = ctx
            .model
            .predict_pair(z, t, ctx.prompt, Some(ctx.md), &p.attention, trajectory_fraction)?;
        Ok((one_step_recon(z, &eu, t, ctx.schedule)?, one_step_recon(z, &ec, t, ctx.schedule)?))
    };
    let mut record = |k: usize, parts: &LossParts| -> Result<()> {
        let (bg, sc, total) = parts.values()?;
        ensure_finite("loss", t, k, total)?;
        event.losses.push(LossValues { bg, sc, total });
        Ok(())
    };

    match p.target {
        OptimizationTarget::NoisyLatent => {
            let mut z = zt.detach();
            let (mut parts, mut g) = event_gradient(&z, t, trajectory_fraction, ctx)?;
            let mut grad_norms = Vec::with_capacity(p.inner_steps + 1);
            let mut accept = |k: usize, parts: &LossParts, g: &Tensor| -> Result<()> {
                record(k, parts)?;
                let gn = finite_scalar(&g.sqr()?.sum_all()?)?.sqrt();
                ensure_finite("gradient norm", t, k, gn)?;
                grad_norms.push(gn);
                Ok(())
            };
            accept(0, &parts, &g)?;
            let mut scale = 1.0;
            let mut rejected = 0;
            match p.step_control {
                StepControl::Plain => {
                    for k in 1..=p.inner_steps {
                        z = (&z - (&g * lr)?)?.detach();
                        if k < p.inner_steps {
                            (parts, g) = event_gradient(&z, t, trajectory_fraction, ctx)?;
                            accept(k, &parts, &g)?;
                        }
                    }
                }
                StepControl::Backtrack => {
                    scale = (*lr_scale * 2.0).min(1.0);
                    for k in 1..=p.inner_steps {
                        let next = (&z - (&g * (lr * scale))?)?.detach();
                        let (cand, cg) = event_gradient(&next, t, trajectory_fraction, ctx)?;
                        let value = finite_scalar(&cand.total)?;
                        if value.is_finite() && value <= finite_scalar(&parts.total)? {
                            (z, parts, g) = (next, cand, cg);
                            accept(k, &parts, &g)?;
                        } else {
                            scale *= 0.5;
                            rejected += 1;
                        }
                    }
                    *lr_scale = scale;
                }
            }
            event.grad_norms = grad_norms;
            event.rejected = rejected;
            event.lr_scale = scale;
            Ok((OptOutcome::Latent(z), event))
        }
        OptimizationTarget::Reconstructions => {
            let (u0, c0) = predict(&zt.detach())?;
            let (mut u, mut c) = (u0.detach(), c0.detach());
            let mut grad_norms = Vec::with_capacity(p.inner_steps);
            for k in 0..p.inner_steps {
                let (vu, vc) = (Var::from_tensor(&u)?, Var::from_tensor(&c)?);
                let parts = total_loss(vu.as_tensor(), vc.as_tensor(), ctx.z_in, ctx.md, lambda, p.eps_floor)?;
                record(k, &parts)?;
                let grads = parts.total.backward()?;
                let gu = grads.get(vu.as_tensor()).cloned().unwrap_or(u.zeros_like()?);
                let gc = grads.get(vc.as_tensor()).cloned().unwrap_or(c.zeros_like()?);
                let gn = (finite_scalar(&gu.sqr()?.sum_all()?)? + finite_scalar(&gc.sqr()?.sum_all()?)?).sqrt();
                ensure_finite("gradient norm", t, k, gn)?;
                grad_norms.push(gn);
                u = (u - (gu * lr)?)?.detach();
                c = (c - (gc * lr)?)?.detach();
            }
            event.grad_norms = grad_norms;
            Ok((OptOutcome::Reconstructions { z0u: u, z0c: c }, event))
        }
    }
}
