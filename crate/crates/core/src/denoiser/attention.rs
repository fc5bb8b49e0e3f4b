//! Scaled dot-product attention with additive masks, and the two mask
//! builders used to keep the prompt and the masked region from leaking into
//! the background.

use std::sync::Mutex;

use candle_core::{Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::pilot::mask::BinaryMask;
use crate::{Error, Real, Result};

/// Magnitude of the additive penalty for blocked pairs.
pub const MASK_LARGE: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionPolicy {
    pub cross_mask_enabled: bool,
    pub self_mask_enabled: bool,
    /// Self-attention masking applies while the trajectory fraction is below this.
    pub self_mask_until_fraction: f64,
}

impl Default for AttentionPolicy {
    fn default() -> Self {
        Self {
            cross_mask_enabled: true,
            self_mask_enabled: true,
            self_mask_until_fraction: 0.5,
        }
    }
}

impl AttentionPolicy {
    pub fn none() -> Self {
        Self {
            cross_mask_enabled: false,
            self_mask_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.self_mask_until_fraction) {
            return Err(Error::InvalidArgument(format!(
                "self_mask_until_fraction must be in [0, 1], got {}",
                self.self_mask_until_fraction
            )));
        }
        Ok(())
    }

    pub fn cross_active(&self, md: Option<&BinaryMask>) -> bool {
        md.is_some() && self.cross_mask_enabled
    }

    pub fn self_active(&self, md: Option<&BinaryMask>, trajectory_fraction: f64) -> bool {
        md.is_some() && self.self_mask_enabled && trajectory_fraction < self.self_mask_until_fraction
    }
}

/// Boolean attention mask, `true` where a (query, key) pair is blocked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub n_queries: usize,
    pub n_keys: usize,
    pub blocked: Vec<bool>,
}

impl AttnMask {
    pub fn open(n_queries: usize, n_keys: usize) -> Self {
        Self {
            n_queries,
            n_keys,
            blocked: vec![false; n_queries * n_keys],
        }
    }

    pub fn is_blocked(&self, q: usize, k: usize) -> bool {
        self.blocked[q * self.n_keys + k]
    }

    pub fn blocked_pairs(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    pub fn is_open(&self) -> bool {
        self.blocked_pairs() == 0
    }

    pub fn row_fully_blocked(&self, q: usize) -> bool {
        self.n_keys > 0 && (0..self.n_keys).all(|k| self.is_blocked(q, k))
    }

    pub fn open_rows(&self) -> usize {
        (0..self.n_queries).filter(|&q| !self.row_fully_blocked(q)).count()
    }

    /// `(n_queries, n_keys)` tensor of `0` and `-MASK_LARGE`.
    pub fn additive<T: Real>(&self) -> Result<Tensor> {
        let data: Vec<T> = self
            .blocked
            .iter()
            .map(|&b| if b { T::lit(-MASK_LARGE) } else { T::zero() })
            .collect();
        Ok(Tensor::from_vec(data, (self.n_queries, self.n_keys), &Device::Cpu)?)
    }

    /// `(n_queries, 1)` tensor, zero on fully blocked rows and one elsewhere.
    pub fn row_gate<T: Real>(&self) -> Result<Tensor> {
        let data: Vec<T> = (0..self.n_queries)
            .map(|q| if self.row_fully_blocked(q) { T::zero() } else { T::one() })
            .collect();
        Ok(Tensor::from_vec(data, (self.n_queries, 1), &Device::Cpu)?)
    }
}

/// Cross-attention mask: background queries (`md = 0`) see no text key.
pub fn build_cross_mask(md: &BinaryMask, n_keys: usize) -> AttnMask {
    let blocked = md
        .data
        .iter()
        .flat_map(|&inside| std::iter::repeat_n(!inside, n_keys))
        .collect();
    AttnMask {
        n_queries: md.len(),
        n_keys,
        blocked,
    }
}

/// Self-attention mask: background queries do not attend to masked keys.
pub fn build_self_mask(md: &BinaryMask) -> AttnMask {
    let n = md.len();
    let mut blocked = Vec::with_capacity(n * n);
    for q in 0..n {
        for k in 0..n {
            blocked.push(!md.data[q] && md.data[k]);
        }
    }
    AttnMask {
        n_queries: n,
        n_keys: n,
        blocked,
    }
}

/// Mask tensors ready to be added to `(.., n_queries, n_keys)` scores.
#[derive(Clone, Debug)]
pub struct MaskTensors {
    pub additive: Tensor,
    /// Present only when some row is fully blocked.
    pub row_gate: Option<Tensor>,
}

impl MaskTensors {
    /// `None` for a mask that blocks nothing, so the unmasked path is taken.
    pub fn from_mask<T: Real>(mask: &AttnMask) -> Result<Option<Self>> {
        if mask.is_open() {
            return Ok(None);
        }
        let row_gate = if mask.open_rows() < mask.n_queries {
            Some(mask.row_gate::<T>()?)
        } else {
            None
        };
        Ok(Some(Self {
            additive: mask.additive::<T>()?,
            row_gate,
        }))
    }
}

/// `softmax(q k^T / sqrt(d) + M) v` over the last two dimensions. Rows whose
/// keys are all blocked produce zeros.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&MaskTensors>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    if k.dim(D::Minus1)? != d || k.dim(D::Minus2)? != v.dim(D::Minus2)? {
        return Err(Error::Shape(format!(
            "attention q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let scores = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    let scores = match mask {
        Some(m) => scores.broadcast_add(&m.additive)?,
        None => scores,
    };
    let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let out = probs.matmul(v)?;
    Ok(match mask.and_then(|m| m.row_gate.as_ref()) {
        Some(g) => out.broadcast_mul(g)?,
        None => out,
    })
}

/// Per-layer record of what a cross-attention block added to the residual stream.
#[derive(Clone, Debug)]
pub struct CrossAttnRecord {
    pub height: usize,
    pub width: usize,
    /// Mask at this layer's resolution, if one was applied.
    pub md: Option<BinaryMask>,
    /// Largest absolute residual contribution at each query position,
    /// maximized over batch and channels.
    pub max_abs_residual: Vec<f64>,
}

impl CrossAttnRecord {
    /// Largest contribution at any background query; `None` without a mask.
    pub fn background_max(&self) -> Option<f64> {
        let md = self.md.as_ref()?;
        Some(
            md.data
                .iter()
                .zip(&self.max_abs_residual)
                .filter(|(inside, _)| !**inside)
                .map(|(_, v)| *v)
                .fold(0.0, f64::max),
        )
    }
}

/// Collects [`CrossAttnRecord`]s during a forward pass.
#[derive(Default, Debug)]
pub struct AttentionProbe {
    records: Mutex<Vec<CrossAttnRecord>>,
}

impl AttentionProbe {
    pub fn push(&self, r: CrossAttnRecord) {
        self.records.lock().expect("probe lock").push(r);
    }

    pub fn take(&self) -> Vec<CrossAttnRecord> {
        std::mem::take(&mut *self.records.lock().expect("probe lock"))
    }
}
