//! Deterministic inpainting test cases: a toy image, a mask over its
//! object and a target prompt for the fill.

use serde::{Deserialize, Serialize};

use crate::denoiser::dataset::{generate_image, ToyImage};
use crate::denoiser::prompt::Label;
use crate::io::ImageRgb;
use crate::pilot::mask::BinaryMask;
use crate::rng::JobRng;
use crate::{Error, Result};

/// Allowed masked fraction of the image.
pub const MASK_AREA: (f64, f64) = (0.10, 0.40);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: usize,
    pub image: ImageRgb,
    pub mask: BinaryMask,
    pub source: Label,
    pub target: Label,
}

/// Rectangle around the object's bounding box, unioned with an elliptical
/// blob that touches the rectangle. The object is always fully covered.
pub fn object_mask(img: &ToyImage, rng: &mut JobRng) -> BinaryMask {
    let (h, w) = (img.pixels.height, img.pixels.width);
    let fg = img.foreground_mask();
    let (y0, x0, y1, x1) = fg.bbox().unwrap_or((h / 2, w / 2, h / 2 + 1, w / 2 + 1));
    let mut grow = |lo: usize, hi: usize, limit: usize| {
        let a = lo.saturating_sub(1 + rng.below(6));
        let b = (hi + 1 + rng.below(6)).min(limit);
        (a, b)
    };
    let (ry0, ry1) = grow(y0, y1, h);
    let (rx0, rx1) = grow(x0, x1, w);
    let cy = rng.range(ry0 as f64, ry1 as f64);
    let cx = rng.range(rx0 as f64, rx1 as f64);
    let ay = rng.range(3.0, 10.0);
    let ax = rng.range(3.0, 10.0);
    BinaryMask::from_fn(h, w, |y, x| {
        let in_rect = (ry0..ry1).contains(&y) && (rx0..rx1).contains(&x);
        let (dy, dx) = ((y as f64 + 0.5 - cy) / ay, (x as f64 + 0.5 - cx) / ax);
        in_rect || dy * dy + dx * dx <= 1.0
    })
}

/// A label other than `source`, uniformly.
pub fn other_label(source: Label, rng: &mut JobRng) -> Label {
    let all: Vec<Label> = Label::all().filter(|&l| l != source).collect();
    all[rng.below(all.len())]
}

/// Case `id` of the stream `seed`; depends on nothing else.
pub fn generate_case(id: usize, seed: u64) -> Result<EvalCase> {
    let mut rng = JobRng::derived(seed, id as u64);
    for _ in 0..64 {
        let img = generate_image(&mut rng);
        for _ in 0..16 {
            let mask = object_mask(&img, &mut rng);
            let f = mask.masked_fraction();
            if (MASK_AREA.0..=MASK_AREA.1).contains(&f) {
                let target = other_label(img.label, &mut rng);
                return Ok(EvalCase {
                    id,
                    image: img.pixels,
                    mask,
                    source: img.label,
                    target,
                });
            }
        }
    }
    Err(Error::InvalidArgument(format!("no admissible mask for case {id}")))
}

pub fn generate_cases(n: usize, seed: u64) -> Result<Vec<EvalCase>> {
    (0..n).map(|i| generate_case(i, seed)).collect()
}

/// Square box around `bbox`, shifted to stay inside an `h` by `w` image.
pub fn square_box(
    (y0, x0, y1, x1): (usize, usize, usize, usize),
    h: usize,
    w: usize,
) -> (usize, usize, usize, usize) {
    let side = (y1 - y0).max(x1 - x0).min(h).min(w);
    let place = |lo: usize, hi: usize, limit: usize| {
        let centre = (lo + hi) as f64 / 2.0;
        let start = (centre - side as f64 / 2.0).round().max(0.0) as usize;
        let start = start.min(limit - side);
        (start, start + side)
    };
    let (sy0, sy1) = place(y0, y1, h);
    let (sx0, sx1) = place(x0, x1, w);
    (sy0, sx0, sy1, sx1)
}
