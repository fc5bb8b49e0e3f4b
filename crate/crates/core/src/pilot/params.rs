use serde::{Deserialize, Serialize};

use crate::denoiser::attention::AttentionPolicy;
use crate::{Error, Result};

/// What the inner optimizer updates at an optimization event.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizationTarget {
    /// The shared noisy latent, with gradients taken through both denoiser passes.
    #[default]
    NoisyLatent,
    /// The two one-step reconstructions, treated as free variables.
    Reconstructions,
}

/// How the inner optimizer picks its step size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepControl {
    /// Always step by the scheduled learning rate.
    Plain,
    /// Scheduled learning rate times a scale that halves whenever a step
    /// would raise the loss (the step is then retried from the same point).
    /// The scale carries over to the next event and may double there, up
    /// to one. Identical to `Plain` while every step descends.
    #[default]
    Backtrack,
}

/// Every sampler knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PilotParams {
    pub omega: f64,
    pub gamma: f64,
    pub tau: usize,
    pub inner_steps: usize,
    pub n_steps: usize,
    pub lambda_anchor: f64,
    pub lr_anchor: f64,
    pub lr_decay_decades: f64,
    pub seed: u64,
    pub attention: AttentionPolicy,
    pub eps_floor: f64,
    pub target: OptimizationTarget,
    pub step_control: StepControl,
    /// Decode the reconstructions at each optimization event for diagnostics.
    pub snapshots: bool,
}

impl Default for PilotParams {
    fn default() -> Self {
        Self {
            omega: 7.5,
            gamma: 1.0,
            tau: 10,
            inner_steps: 10,
            n_steps: 200,
            lambda_anchor: 110.0,
            lr_anchor: 0.03,
            lr_decay_decades: 1.0,
            seed: 0,
            attention: AttentionPolicy::default(),
            eps_floor: 1e-8,
            target: OptimizationTarget::NoisyLatent,
            step_control: StepControl::Backtrack,
            snapshots: false,
        }
    }
}

impl PilotParams {
    /// Shorter trajectory and a lower coherence scale for interactive edits.
    pub fn interactive() -> Self {
        Self {
            gamma: 0.4,
            n_steps: 30,
            tau: 3,
            inner_steps: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !self.omega.is_finite() {
            return bad(format!("omega must be finite, got {}", self.omega));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if self.tau == 0 {
            return bad("tau must be at least 1".into());
        }
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1".into());
        }
        if !(self.lambda_anchor >= 0.0 && self.lambda_anchor.is_finite()) {
            return bad(format!("lambda_anchor must be non-negative, got {}", self.lambda_anchor));
        }
        if !(self.lr_anchor >= 0.0 && self.lr_anchor.is_finite()) {
            return bad(format!("lr_anchor must be non-negative, got {}", self.lr_anchor));
        }
        if !self.lr_decay_decades.is_finite() {
            return bad("lr_decay_decades must be finite".into());
        }
        if self.eps_floor.is_nan() || self.eps_floor <= 0.0 {
            return bad(format!("eps_floor must be positive, got {}", self.eps_floor));
        }
        self.attention.validate()
    }

    /// Number of leading sampling steps in the optimization stage,
    /// `ceil(gamma * n_steps)`.
    pub fn optimization_steps(&self) -> usize {
        let raw = self.gamma * self.n_steps as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(self.n_steps)
    }

    /// Whether an optimization event fires at sampling index `i`.
    pub fn is_event(&self, i: usize) -> bool {
        self.inner_steps > 0 && i < self.optimization_steps() && i.is_multiple_of(self.tau)
    }

    pub fn event_indices(&self) -> Vec<usize> {
        (0..self.n_steps).filter(|&i| self.is_event(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_presets() {
        let p = PilotParams::default();
        p.validate().unwrap();
        assert_eq!(p.optimization_steps(), 200);
        assert_eq!(p.event_indices().len(), 20);
        let fast = PilotParams::interactive();
        fast.validate().unwrap();
        assert_eq!(fast.optimization_steps(), 12);
        assert_eq!(fast.event_indices().len(), 4);
        let zero = PilotParams { gamma: 0.0, ..p.clone() };
        assert!(zero.event_indices().is_empty());
        let quarter = PilotParams { gamma: 0.25, n_steps: 30, ..p };
        assert_eq!(quarter.optimization_steps(), 8);
    }

    #[test]
    fn rejects_bad_values() {
        for p in [
            PilotParams { gamma: 1.5, ..Default::default() },
            PilotParams { tau: 0, ..Default::default() },
            PilotParams { n_steps: 0, ..Default::default() },
            PilotParams { eps_floor: 0.0, ..Default::default() },
            PilotParams { omega: f64::NAN, ..Default::default() },
        ] {
            assert!(p.validate().is_err());
        }
    }

    #[test]
    fn partial_json_fills_defaults() {
        let p: PilotParams = serde_json::from_str(r#"{"gamma": 0.5, "seed": 3}"#).unwrap();
        assert_eq!((p.gamma, p.seed, p.tau), (0.5, 3, 10));
    }
}
