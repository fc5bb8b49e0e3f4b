use candle_core::Tensor;

use crate::pilot::mask::BinaryMask;
use crate::rng::JobRng;
use crate::schedule::{q_sample_at, Schedule, Step};
use crate::{Error, Real, Result};

/// Output of one blending step, with the noise that was drawn.
#[derive(Clone, Debug)]
pub struct Blended {
    pub z: Tensor,
    pub z_bg: Tensor,
    pub eps: Tensor,
}

/// Keep the generated latent inside the mask and a freshly noised copy of
/// the input latent outside it. Selection is exact, not arithmetic.
pub fn blend_step<T: Real>(
    z_fg: &Tensor,
    z_in: &Tensor,
    step: Step,
    md: &BinaryMask,
    rng: &mut JobRng,
    s: &Schedule<T>,
) -> Result<Blended> {
    if z_fg.dims() != z_in.dims() {
        return Err(Error::Shape(format!("blend_step: {:?} vs {:?}", z_fg.dims(), z_in.dims())));
    }
    let eps = rng.normal_tensor::<T, _>(z_in.dims())?;
    let z_bg = q_sample_at(z_in, step, &eps, s)?;
    let sel = md.to_u8_tensor()?.broadcast_as(z_fg.shape())?;
    let z = sel.where_cond(z_fg, &z_bg)?;
    Ok(Blended { z, z_bg, eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleSpec;

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn degenerate_masks_and_cellwise_identity() {
        let s = Schedule::<f32>::new(ScheduleSpec::default()).unwrap();
        let mut rng = JobRng::new(5);
        let fg = rng.normal_tensor::<f32, _>((1, 4, 4, 4)).unwrap();
        let zin = rng.normal_tensor::<f32, _>((1, 4, 4, 4)).unwrap();

        let ones = BinaryMask::filled(4, 4, true);
        let b = blend_step(&fg, &zin, Step::At(300), &ones, &mut JobRng::new(1), &s).unwrap();
        assert_eq!(flat(&b.z), flat(&fg));

        let zeros = BinaryMask::filled(4, 4, false);
        let b = blend_step(&fg, &zin, Step::At(300), &zeros, &mut JobRng::new(1), &s).unwrap();
        assert_eq!(flat(&b.z), flat(&b.z_bg));

        let md = BinaryMask::from_fn(4, 4, |y, x| y < 2 && x > 0);
        let b = blend_step(&fg, &zin, Step::At(300), &md, &mut JobRng::new(1), &s).unwrap();
        let expect = flat(&crate::schedule::q_sample(&zin, 300, &b.eps, &s).unwrap());
        let (z, f) = (flat(&b.z), flat(&fg));
        for (i, (&got, &want)) in z.iter().zip(&expect).enumerate() {
            let cell = i % 16;
            if md.data[cell] {
                assert_eq!(got.to_bits(), f[i].to_bits());
            } else {
                assert_eq!(got.to_bits(), want.to_bits());
            }
        }
    }
}
