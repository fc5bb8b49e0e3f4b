use candle_core::Tensor;

use crate::{Error, Result};

/// Classifier-free combination of one-step reconstructions,
/// `z0u + omega (z0c - z0u)`, written so that `omega = 0` and `omega = 1`
/// return their endpoint exactly.
pub fn cfg_combine(z0u: &Tensor, z0c: &Tensor, omega: f64) -> Result<Tensor> {
    if z0u.dims() != z0c.dims() {
        return Err(Error::Shape(format!("cfg_combine: {:?} vs {:?}", z0u.dims(), z0c.dims())));
    }
    Ok(((z0u * (1.0 - omega))? + (z0c * omega)?)?)
}
