//! Binary masks in pixel and latent space.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Row-major binary mask; `true` marks the region to inpaint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} cells, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.count() as f64 / self.len() as f64
    }

    /// Fraction of cells outside the mask.
    pub fn unmasked_fraction(&self) -> f64 {
        (self.len() - self.count()) as f64 / self.len() as f64
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&v| v)
    }

    pub fn none(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Bounding box `(y0, x0, y1, x1)` of the masked cells, end-exclusive.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y + 1, x + 1),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1)),
                    });
                }
            }
        }
        bb
    }

    /// `(1, 1, H, W)` tensor with ones on the mask.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor> {
        let data: Vec<T> = self
            .data
            .iter()
            .map(|&v| if v { T::one() } else { T::zero() })
            .collect();
        Ok(Tensor::from_vec(data, (1, 1, self.height, self.width), &Device::Cpu)?)
    }

    /// `(1, 1, H, W)` u8 tensor, for exact selection with `where_cond`.
    pub fn to_u8_tensor(&self) -> Result<Tensor> {
        let data: Vec<u8> = self.data.iter().map(|&v| v as u8).collect();
        Ok(Tensor::from_vec(data, (1, 1, self.height, self.width), &Device::Cpu)?)
    }

    /// Max-pool over `factor x factor` blocks.
    pub fn max_pool(&self, factor: usize) -> Result<BinaryMask> {
        downsample_mask(self, factor)
    }
}

/// Latent-resolution mask: a cell is masked iff any pixel it covers is masked.
pub fn downsample_mask(m: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    if factor == 0 || !m.height.is_multiple_of(factor) || !m.width.is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "mask {}x{} not divisible by factor {factor}",
            m.height, m.width
        )));
    }
    let (h, w) = (m.height / factor, m.width / factor);
    Ok(BinaryMask::from_fn(h, w, |y, x| {
        (0..factor).any(|dy| (0..factor).any(|dx| m.get(y * factor + dy, x * factor + dx)))
    }))
}

/// Pixel mask together with its latent-resolution counterpart.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPair {
    pub m: BinaryMask,
    pub md: BinaryMask,
}

impl MaskPair {
    pub fn new(m: BinaryMask, factor: usize) -> Result<Self> {
        let md = downsample_mask(&m, factor)?;
        Ok(Self { m, md })
    }

    /// No latent cell is masked, so the job reduces to reconstruction.
    pub fn is_degenerate(&self) -> bool {
        self.md.none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_cases() {
        let zeros = BinaryMask::filled(8, 8, false);
        assert!(downsample_mask(&zeros, 4).unwrap().none());
        let ones = BinaryMask::filled(8, 8, true);
        assert!(downsample_mask(&ones, 4).unwrap().all());

        let single = BinaryMask::from_fn(64, 64, |y, x| y == 5 && x == 5);
        let md = downsample_mask(&single, 4).unwrap();
        assert_eq!((md.height, md.width), (16, 16));
        assert_eq!(md.count(), 1);
        assert!(md.get(1, 1));

        assert!(downsample_mask(&BinaryMask::filled(6, 8, false), 4).is_err());
    }

    #[test]
    fn bbox_and_fractions() {
        let m = BinaryMask::from_fn(4, 4, |y, x| (1..3).contains(&y) && x == 2);
        assert_eq!(m.bbox(), Some((1, 2, 3, 3)));
        assert_eq!(m.masked_fraction(), 2.0 / 16.0);
        assert_eq!(BinaryMask::filled(2, 2, false).bbox(), None);
    }
}
