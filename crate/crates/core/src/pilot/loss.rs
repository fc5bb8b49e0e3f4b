//! Background preservation and semantic centralization losses.
//!
//! All losses are differentiable scalar tensors. The latent mask `md`
//! (`true` inside the region to inpaint) is broadcast over channels.

use candle_core::{DType, Tensor};

use crate::pilot::mask::BinaryMask;
use crate::{Error, Result};

/// `(1, 1, h, w)` tensor equal to one on background cells (`md = 0`).
pub fn background_weight(md: &BinaryMask, dtype: DType) -> Result<Tensor> {
    let inv = BinaryMask::new(md.height, md.width, md.data.iter().map(|&v| !v).collect())?;
    Ok(inv.to_u8_tensor()?.to_dtype(dtype)?)
}

fn check(a: &Tensor, b: &Tensor, md: &BinaryMask, what: &str) -> Result<()> {
    let dims = a.dims();
    if dims != b.dims() || dims.len() < 2 || dims[dims.len() - 2..] != [md.height, md.width] {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?} with mask {}x{}",
            a.dims(),
            b.dims(),
            md.height,
            md.width
        )));
    }
    Ok(())
}

fn masked_energy(d: &Tensor, weight: &Tensor) -> Result<Tensor> {
    Ok(d.broadcast_mul(weight)?.sqr()?.sum_all()?)
}

/// Squared error between the unconditional reconstruction and the input
/// latent, restricted to the background.
pub fn loss_bg(z0u: &Tensor, z_in: &Tensor, md: &BinaryMask) -> Result<Tensor> {
    check(z0u, z_in, md, "loss_bg")?;
    masked_energy(&(z0u - z_in)?, &background_weight(md, z0u.dtype())?)
}

/// Fraction of the conditional/unconditional difference energy lying in
/// the background. Defined as zero when the total energy is below `eps_floor`.
pub fn loss_sc(z0u: &Tensor, z0c: &Tensor, md: &BinaryMask, eps_floor: f64) -> Result<Tensor> {
    check(z0u, z0c, md, "loss_sc")?;
    let d = (z0u - z0c)?;
    let den = d.sqr()?.sum_all()?;
    if den.to_dtype(DType::F64)?.to_scalar::<f64>()? < eps_floor {
        return Ok(den.zeros_like()?.detach());
    }
    let num = masked_energy(&d, &background_weight(md, d.dtype())?)?;
    Ok((num / den)?)
}

/// Complementary form of [`loss_sc`]: one minus the in-mask energy fraction.
pub fn loss_sc_complement(z0u: &Tensor, z0c: &Tensor, md: &BinaryMask, eps_floor: f64) -> Result<Tensor> {
    check(z0u, z0c, md, "loss_sc")?;
    let d = (z0u - z0c)?;
    let den = d.sqr()?.sum_all()?;
    if den.to_dtype(DType::F64)?.to_scalar::<f64>()? < eps_floor {
        return Ok(den.zeros_like()?.detach());
    }
    let inside = md.to_u8_tensor()?.to_dtype(d.dtype())?;
    let num = masked_energy(&d, &inside)?;
    Ok((num / den)?.affine(-1.0, 1.0)?)
}

/// The two loss terms and their weighted sum.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub bg: Tensor,
    pub sc: Tensor,
    pub total: Tensor,
}

impl LossParts {
    /// `(bg, sc, total)` as plain numbers.
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok((v(&self.bg)?, v(&self.sc)?, v(&self.total)?))
    }
}

/// `L = L_bg + lam * L_s`.
pub fn total_loss(
    z0u: &Tensor,
    z0c: &Tensor,
    z_in: &Tensor,
    md: &BinaryMask,
    lam: f64,
    eps_floor: f64,
) -> Result<LossParts> {
    if lam.is_nan() || lam < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lam}")));
    }
    let bg = loss_bg(z0u, z_in, md)?;
    let sc = loss_sc(z0u, z0c, md, eps_floor)?;
    let total = (&bg + (&sc * lam)?)?;
    Ok(LossParts { bg, sc, total })
}
