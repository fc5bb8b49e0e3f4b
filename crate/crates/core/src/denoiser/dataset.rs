//! Procedural dataset: one colored shape on a muted, lightly textured
//! background.

use std::io::{BufRead, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::prompt::{Color, Label, ShapeKind};
use crate::io::ImageRgb;
use crate::pilot::mask::BinaryMask;
use crate::rng::JobRng;
use crate::{Error, Real, Result};

pub const IMAGE_SIZE: usize = 64;

/// Smallest and largest foreground area as a fraction of the image.
pub const AREA_RANGE: (f64, f64) = (0.06, 0.22);
const TEXTURE_AMPLITUDE: f64 = 0.04;
const TEXTURE_GRID: usize = 8;
const MARGIN: f64 = 2.0;

/// Muted background palette, RGB in `[0, 1]`.
pub const BACKGROUNDS: [[f32; 3]; 4] = [
    [0.55, 0.55, 0.55],
    [0.76, 0.70, 0.55],
    [0.40, 0.46, 0.55],
    [0.56, 0.64, 0.52],
];

/// Placement of the foreground shape. `extent` is the radius for circles,
/// the half side for squares and the half base for triangles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub center_y: f64,
    pub center_x: f64,
    pub extent: f64,
}

impl Geometry {
    fn contains(&self, shape: ShapeKind, y: f64, x: f64) -> bool {
        let (dy, dx, e) = (y - self.center_y, x - self.center_x, self.extent);
        match shape {
            ShapeKind::Circle => dy * dy + dx * dx <= e * e,
            ShapeKind::Square => dy.abs() <= e && dx.abs() <= e,
            // Apex at the top, base at the bottom, height equal to the base.
            ShapeKind::Triangle => {
                if dy.abs() > e {
                    return false;
                }
                let half_width = e * (dy + e) / (2.0 * e);
                dx.abs() <= half_width
            }
        }
    }

    fn extent_for_area(shape: ShapeKind, area: f64) -> f64 {
        match shape {
            ShapeKind::Circle => (area / std::f64::consts::PI).sqrt(),
            ShapeKind::Square => area.sqrt() / 2.0,
            ShapeKind::Triangle => (area / 2.0).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyImage {
    pub pixels: ImageRgb,
    pub label: Label,
    pub background: usize,
    pub geometry: Geometry,
}

impl ToyImage {
    /// Pixels whose centre lies inside the shape.
    pub fn foreground_mask(&self) -> BinaryMask {
        let g = self.geometry;
        BinaryMask::from_fn(self.pixels.height, self.pixels.width, |y, x| {
            g.contains(self.label.shape, y as f64 + 0.5, x as f64 + 0.5)
        })
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_mask().masked_fraction()
    }
}

/// Smooth value noise in `[-1, 1]`, bilinearly interpolated from a coarse grid.
fn value_noise(rng: &mut JobRng, size: usize) -> Vec<f64> {
    let g = TEXTURE_GRID + 1;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.range(-1.0, 1.0)).collect();
    let cell = size as f64 / TEXTURE_GRID as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let gy = (y as f64 + 0.5) / cell;
        let (y0, fy) = ((gy.floor() as usize).min(TEXTURE_GRID - 1), gy - gy.floor());
        for x in 0..size {
            let gx = (x as f64 + 0.5) / cell;
            let (x0, fx) = ((gx.floor() as usize).min(TEXTURE_GRID - 1), gx - gx.floor());
            let at = |yy: usize, xx: usize| grid[yy * g + xx];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Render one image from its own random stream.
pub fn generate_image(rng: &mut JobRng) -> ToyImage {
    let label = Label::from_index(rng.below(Label::COUNT)).expect("class index in range");
    let background = rng.below(BACKGROUNDS.len());
    let n = IMAGE_SIZE as f64;
    let area = rng.range(AREA_RANGE.0, AREA_RANGE.1) * n * n;
    let extent = Geometry::extent_for_area(label.shape, area);
    let lo = MARGIN + extent;
    let hi = n - MARGIN - extent;
    let geometry = Geometry {
        center_y: rng.range(lo, hi),
        center_x: rng.range(lo, hi),
        extent,
    };
    let texture = value_noise(rng, IMAGE_SIZE);

    let bg = BACKGROUNDS[background];
    let fg = label.color.rgb();
    let mut pixels = ImageRgb::filled(IMAGE_SIZE, IMAGE_SIZE, [0.0; 3]);
    // 2x2 supersampling for soft edges.
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut cover = 0.0;
            for sy in SUB {
                for sx in SUB {
                    if geometry.contains(label.shape, y as f64 + sy, x as f64 + sx) {
                        cover += 0.25;
                    }
                }
            }
            let tex = TEXTURE_AMPLITUDE * texture[y * IMAGE_SIZE + x];
            for c in 0..3 {
                let back = 2.0 * bg[c] as f64 - 1.0 + tex;
                let front = 2.0 * fg[c] as f64 - 1.0;
                let v = back * (1.0 - cover) + front * cover;
                pixels.set(c, y, x, v.clamp(-1.0, 1.0) as f32);
            }
        }
    }
    ToyImage {
        pixels,
        label,
        background,
        geometry,
    }
}

/// `n` images; image `i` depends only on `(seed, i)`.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<ToyImage>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    Ok((0..n)
        .map(|i| generate_image(&mut JobRng::derived(seed, i as u64)))
        .collect())
}

/// Seed offset that keeps held-out images disjoint from a training set
/// generated with the same seed.
pub const VALIDATION_SEED_OFFSET: u64 = 0x5eed_0000_0000;

/// Held-out companion of `generate_dataset(_, seed)`.
pub fn validation_dataset(n: usize, seed: u64) -> Result<Vec<ToyImage>> {
    generate_dataset(n, seed.wrapping_add(VALIDATION_SEED_OFFSET))
}

/// Stack images into a `(B, 3, H, W)` tensor.
pub fn stack_images<T: Real>(images: &[&ImageRgb]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
        data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?)
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    path: String,
    shape_id: usize,
    color_id: usize,
    caption: String,
    background: usize,
    geometry: Geometry,
}

pub const LABELS_FILE: &str = "labels.jsonl";

/// Write `images/<index>.png` plus a JSON-lines label manifest.
pub fn save_dataset(dir: &Path, images: &[ToyImage]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut manifest = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let path = format!("images/{i:05}.png");
        img.pixels.save_png(&dir.join(&path))?;
        let line = LabelLine {
            path,
            shape_id: img.label.shape.id(),
            color_id: img.label.color.id(),
            caption: img.label.caption(),
            background: img.background,
            geometry: img.geometry,
        };
        serde_json::to_writer(&mut manifest, &line)?;
        manifest.write_all(b"\n")?;
    }
    crate::io::write_atomic(&dir.join(LABELS_FILE), &manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<ToyImage>> {
    let file = std::fs::File::open(dir.join(LABELS_FILE))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelLine = serde_json::from_str(&line)?;
        let label = Label {
            shape: ShapeKind::from_id(rec.shape_id)
                .ok_or_else(|| Error::InvalidArgument(format!("bad shape id {}", rec.shape_id)))?,
            color: Color::from_id(rec.color_id)
                .ok_or_else(|| Error::InvalidArgument(format!("bad color id {}", rec.color_id)))?,
        };
        out.push(ToyImage {
            pixels: ImageRgb::load_png(&dir.join(&rec.path))?,
            label,
            background: rec.background,
            geometry: rec.geometry,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_pixels() {
        let a = generate_dataset(1, 7).unwrap();
        let b = generate_dataset(1, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(1, 8).unwrap();
        assert_ne!(a[0].pixels, c[0].pixels);
    }

    #[test]
    fn pixels_in_range_and_foreground_bounded() {
        for img in generate_dataset(300, 1).unwrap() {
            assert!(img.pixels.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            let f = img.foreground_fraction();
            assert!((0.05..=0.40).contains(&f), "foreground fraction {f}");
            let bb = img.foreground_mask().bbox().unwrap();
            assert!(bb.0 >= 1 && bb.1 >= 1 && bb.2 < IMAGE_SIZE && bb.3 < IMAGE_SIZE);
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = generate_dataset(3, 2).unwrap();
        save_dataset(dir.path(), &imgs).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in imgs.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.geometry, b.geometry);
            let worst = a
                .pixels
                .data
                .iter()
                .zip(&b.pixels.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(worst <= 1.0 / 255.0 + 1e-6);
        }
    }
}
