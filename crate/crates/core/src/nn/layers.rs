//! Building blocks shared by the autoencoder, the U-Net and the oracle
//! classifier. Everything here is composed from differentiable tensor ops.

use candle_core::{Module, Tensor, D};

use super::im2col::im2col;
use super::params::{Init, ParamBuilder};
use crate::{Real, Result};

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = pb.tensor("weight", &[out_channels, fan_in], Init::Uniform(bound))?;
        let bias = pb.tensor("bias", &[out_channels, 1], Init::Uniform(bound))?;
        Ok(Self {
            weight,
            bias,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (cols, oh, ow) = if self.kernel == 1 && self.stride == 1 {
            (x.reshape((b, c, h * w))?, h, w)
        } else {
            let cols = im2col(x, self.kernel, self.stride, self.padding)?;
            let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
            let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
            (cols, oh, ow)
        };
        let y = self.weight.broadcast_matmul(&cols)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, self.out_channels, oh, ow))?)
    }
}

pub fn linear<T: Real>(
    pb: &mut ParamBuilder<'_, T>,
    in_dim: usize,
    out_dim: usize,
) -> Result<candle_nn::Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = pb.tensor("weight", &[out_dim, in_dim], Init::Uniform(bound))?;
    let b = pb.tensor("bias", &[out_dim], Init::Uniform(bound))?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

pub fn group_norm<T: Real>(
    pb: &mut ParamBuilder<'_, T>,
    groups: usize,
    channels: usize,
) -> Result<candle_nn::GroupNorm> {
    let w = pb.tensor("weight", &[channels], Init::Ones)?;
    let b = pb.tensor("bias", &[channels], Init::Zeros)?;
    Ok(candle_nn::GroupNorm::new(w, b, channels, groups, 1e-5)?)
}

/// Layer norm over the last dimension, composed from primitive ops so that
/// it stays differentiable for every dtype.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.tensor("weight", &[dim], Init::Ones)?,
            bias: pb.tensor("bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

pub fn norm_act(norm: &candle_nn::GroupNorm, x: &Tensor) -> Result<Tensor> {
    silu(&norm.forward(x)?)
}

/// Nearest-neighbour 2x upsampling built from a broadcast, so its gradient
/// is a plain sum.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Sinusoidal embedding of integer timesteps, `(B,) -> (B, dim)`.
pub fn timestep_embedding<T: Real>(ts: &[usize], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::lit((t as f64 * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::lit((t as f64 * freq).sin()));
        }
        for _ in 2 * half..dim {
            data.push(T::zero());
        }
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), &candle_core::Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Params;
    use crate::rng::JobRng;
    use candle_core::{Device, Var};

    #[test]
    fn upsample_repeats_pixels_and_sums_gradients() {
        let x = Var::from_tensor(&Tensor::new(&[[[[1f64, 2.], [3., 4.]]]], &Device::Cpu).unwrap()).unwrap();
        let y = upsample2x(x.as_tensor()).unwrap();
        assert_eq!(y.dims(), &[1, 1, 4, 4]);
        let rows = y.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(rows[0], vec![1., 1., 2., 2.]);
        assert_eq!(rows[3], vec![3., 3., 4., 4.]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gx, vec![4.; 4]);
    }

    #[test]
    fn conv_output_geometry() {
        let mut p = Params::<f32>::default();
        let mut rng = JobRng::new(0);
        let mut pb = p.builder(&mut rng);
        let down = Conv2d::new(&mut pb.sub("down"), 3, 8, 3, 2).unwrap();
        let point = Conv2d::new(&mut pb.sub("point"), 8, 2, 1, 1).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), candle_core::DType::F32, &Device::Cpu).unwrap();
        let y = down.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 8, 8, 8]);
        assert_eq!(point.forward(&y).unwrap().dims(), &[2, 2, 8, 8]);
    }

    #[test]
    fn layer_norm_normalizes_last_dim() {
        let mut p = Params::<f64>::default();
        let mut rng = JobRng::new(0);
        let ln = LayerNorm::new(&mut p.builder(&mut rng), 4).unwrap();
        let x = Tensor::new(&[[1f64, 2., 3., 10.]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
