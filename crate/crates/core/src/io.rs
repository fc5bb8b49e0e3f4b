//! Images, masks and atomic file writes.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::pilot::mask::BinaryMask;
use crate::{Error, Real, Result};

/// Channel-major RGB image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRgb {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// `(1, 3, H, W)` tensor of dtype `T`.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor> {
        let data: Vec<T> = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Ok(Tensor::from_vec(data, (1, 3, self.height, self.width), &Device::Cpu)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)` tensors of any float dtype.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("expected an image tensor, got rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    /// Luminance plane, row-major.
    pub fn luminance(&self) -> Vec<f32> {
        let n = self.pixel_count();
        (0..n)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[n + i] + 0.114 * self.data[2 * n + i])
            .collect()
    }

    /// Bilinear resample of the `[y0, y1) x [x0, x1)` window to `size x size`.
    pub fn crop_resized(&self, (y0, x0, y1, x1): (usize, usize, usize, usize), size: usize) -> ImageRgb {
        let mut out = ImageRgb::filled(size, size, [0.0; 3]);
        let (ch, cw) = ((y1 - y0) as f32, (x1 - x0) as f32);
        for oy in 0..size {
            let sy = y0 as f32 + (oy as f32 + 0.5) * ch / size as f32 - 0.5;
            let sy = sy.clamp(0.0, (self.height - 1) as f32);
            let (ya, fy) = (sy.floor() as usize, sy.fract());
            let yb = (ya + 1).min(self.height - 1);
            for ox in 0..size {
                let sx = x0 as f32 + (ox as f32 + 0.5) * cw / size as f32 - 0.5;
                let sx = sx.clamp(0.0, (self.width - 1) as f32);
                let (xa, fx) = (sx.floor() as usize, sx.fract());
                let xb = (xa + 1).min(self.width - 1);
                for c in 0..3 {
                    let top = self.get(c, ya, xa) * (1.0 - fx) + self.get(c, ya, xb) * fx;
                    let bot = self.get(c, yb, xa) * (1.0 - fx) + self.get(c, yb, xb) * fx;
                    out.set(c, oy, ox, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let q = |c| {
                let v = self.get(c, y as usize, x as usize);
                (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
            };
            image::Rgb([q(0), q(1), q(2)])
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageRgb::filled(h, w, [0.0; 3]);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p.0[c] as f32 / 255.0 * 2.0 - 1.0);
            }
        }
        out
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_png_bytes()?)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    /// Copy of `self` where `mask` is set, `other` elsewhere.
    pub fn composite(&self, other: &ImageRgb, mask: &BinaryMask) -> Result<ImageRgb> {
        if (self.height, self.width) != (other.height, other.width)
            || (self.height, self.width) != (mask.height, mask.width)
        {
            return Err(Error::Shape("composite: size mismatch".into()));
        }
        let n = self.pixel_count();
        let mut out = other.clone();
        for c in 0..3 {
            for i in 0..n {
                if mask.data[i] {
                    out.data[c * n + i] = self.data[c * n + i];
                }
            }
        }
        Ok(out)
    }
}

pub fn mask_to_png_bytes(mask: &BinaryMask) -> Result<Vec<u8>> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Single-channel mask; any pixel value `>= 128` is masked. Colour images
/// are reduced to luma first.
pub fn mask_from_png_bytes(bytes: &[u8]) -> Result<BinaryMask> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinaryMask::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32).0[0] >= 128))
}

pub fn save_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, &mask_to_png_bytes(mask)?)
}

pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    mask_from_png_bytes(&std::fs::read(path)?)
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}-{}",
        name.to_string_lossy(),
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Tile equally sized images into a grid with a 2 pixel gutter.
pub fn contact_sheet(rows: &[Vec<ImageRgb>]) -> Result<ImageRgb> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::InvalidArgument("contact sheet needs at least one image".into()))?;
    let (h, w) = (first.height, first.width);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gap = 2;
    let (sh, sw) = (rows.len() * (h + gap) + gap, cols * (w + gap) + gap);
    let mut sheet = ImageRgb::filled(sh, sw, [1.0; 3]);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if (img.height, img.width) != (h, w) {
                return Err(Error::Shape("contact sheet images differ in size".into()));
            }
            let (oy, ox) = (gap + r * (h + gap), gap + c * (w + gap));
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        sheet.set(ch, oy + y, ox + x, img.get(ch, y, x));
                    }
                }
            }
        }
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes() {
        let img = ImageRgb::filled(4, 5, [-1.0, 0.0, 1.0]);
        let back = ImageRgb::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!((back.height, back.width), (4, 5));
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn mask_png_threshold() {
        let m = BinaryMask::from_fn(3, 3, |y, x| y == x);
        assert_eq!(mask_from_png_bytes(&mask_to_png_bytes(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
