//! Mask-area dependent loss weight and the per-timestep learning rate.

use crate::pilot::mask::BinaryMask;

/// `anchor * (r / (1/3))^2`, where `r` is the unmasked fraction.
pub fn lambda_for_fraction(unmasked_fraction: f64, anchor: f64) -> f64 {
    let k = 3.0 * unmasked_fraction;
    anchor * k * k
}

pub fn lambda_schedule(md: &BinaryMask, anchor: f64) -> f64 {
    lambda_for_fraction(md.unmasked_fraction(), anchor)
}

/// `anchor * 10^(decades * (t / t_train - 0.95))`.
pub fn lr_schedule(t: usize, t_train: usize, anchor: f64, decay_decades: f64) -> f64 {
    let x = t as f64 / t_train as f64 - 0.95;
    anchor * 10f64.powf(decay_decades * x)
}
