//! Oracle metrics computed on pixel images.

use serde::{Deserialize, Serialize};

use crate::io::ImageRgb;
use crate::pilot::mask::BinaryMask;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Pixel MSE outside the mask, before final compositing.
    pub background_mse: f64,
    pub seam_score: f64,
    /// Oracle probability of the requested class on the mask crop.
    pub semantic_score: f64,
    pub wall_time_s: f64,
    /// The mask leaves no background (or no boundary) to measure.
    #[serde(default)]
    pub degenerate_mask: bool,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        [self.background_mse, self.seam_score, self.semantic_score, self.wall_time_s]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn same_size(img: &ImageRgb, m: &BinaryMask) -> Result<()> {
    if (img.height, img.width) != (m.height, m.width) {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            img.height, img.width, m.height, m.width
        )));
    }
    Ok(())
}

/// Mean squared error over unmasked pixels and channels; zero when the mask
/// covers everything.
pub fn background_mse(output_raw: &ImageRgb, input: &ImageRgb, m: &BinaryMask) -> Result<f64> {
    same_size(output_raw, m)?;
    same_size(input, m)?;
    let n = m.len();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for c in 0..3 {
        for i in 0..n {
            if !m.data[i] {
                let d = (output_raw.data[c * n + i] - input.data[c * n + i]) as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Central-difference gradient magnitude of luminance, borders clamped.
pub fn gradient_magnitude(img: &ImageRgb) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let lum = img.luminance();
    let at = |y: usize, x: usize| lum[y * w + x] as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1))) / 2.0;
            let gy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x)) / 2.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Pixels whose 3x3 neighbourhood holds both masked and unmasked pixels:
/// a two pixel wide band straddling the boundary.
pub fn boundary_ring(m: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(m.height, m.width, |y, x| {
        let (mut inside, mut outside) = (false, false);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                if yy < 0 || xx < 0 || yy >= m.height as i64 || xx >= m.width as i64 {
                    continue;
                }
                if m.get(yy as usize, xx as usize) {
                    inside = true;
                } else {
                    outside = true;
                }
            }
        }
        inside && outside
    })
}

const FLAT: f64 = 1e-9;

/// Mean gradient on the boundary ring over mean gradient in the mask
/// interior (all non-ring pixels when the interior is empty). Near 1 means
/// the boundary is no busier than the fill; a flat image scores exactly 1.
pub fn seam_score(output: &ImageRgb, m: &BinaryMask) -> Result<f64> {
    same_size(output, m)?;
    let ring = boundary_ring(m);
    if ring.none() {
        return Err(Error::InvalidArgument("mask has no boundary".into()));
    }
    let g = gradient_magnitude(output);
    let mean = |sel: &dyn Fn(usize) -> bool| {
        let (s, n) = (0..g.len()).filter(|&i| sel(i)).fold((0.0, 0usize), |(s, n), i| (s + g[i], n + 1));
        (n > 0).then(|| s / n as f64)
    };
    let ring_mean = mean(&|i| ring.data[i]).unwrap_or(0.0);
    let interior = mean(&|i| m.data[i] && !ring.data[i])
        .or_else(|| mean(&|i| !ring.data[i]))
        .unwrap_or(0.0);
    if ring_mean < FLAT && interior < FLAT {
        return Ok(1.0);
    }
    Ok(ring_mean / interior.max(FLAT))
}
