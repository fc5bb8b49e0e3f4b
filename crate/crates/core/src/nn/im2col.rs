//! Patch extraction as a differentiable op pair.
//!
//! Convolution is computed as `weight @ im2col(x)`. The two ops below are
//! linear and adjoint to each other, so each one's backward pass is the
//! other, and a convolution's backward pass costs two matrix products plus
//! a scatter.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Visit every (column-buffer index, image index) pair that lies inside
    /// the unpadded image, for one batch item.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let k = self.kernel;
        let cols = oh * ow;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = (c * self.height + iy as usize) * self.width;
                        let dst_row = row * cols + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(dst_row + ox, src_row + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("patch ops require contiguous input"),
    }
}

fn gather<T: Copy + num_traits::Zero>(g: &PatchGeometry, batch: usize, src: &[T]) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let per_out = g.rows() * oh * ow;
    let per_in = g.channels * g.height * g.width;
    let mut dst = vec![T::zero(); batch * per_out];
    for b in 0..batch {
        let s = &src[b * per_in..(b + 1) * per_in];
        let d = &mut dst[b * per_out..(b + 1) * per_out];
        g.for_each_tap(|di, si| d[di] = s[si]);
    }
    dst
}

fn scatter<T: Copy + num_traits::Zero + std::ops::AddAssign>(
    g: &PatchGeometry,
    batch: usize,
    src: &[T],
) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let per_col = g.rows() * oh * ow;
    let per_img = g.channels * g.height * g.width;
    let mut dst = vec![T::zero(); batch * per_img];
    for b in 0..batch {
        let s = &src[b * per_col..(b + 1) * per_col];
        let d = &mut dst[b * per_img..(b + 1) * per_img];
        g.for_each_tap(|ci, ii| d[ii] += s[ci]);
    }
    dst
}

/// `(B, C, H, W) -> (B, C*k*k, Ho*Wo)`, rows ordered `(c, ky, kx)`.
#[derive(Clone, Copy, Debug)]
pub struct Im2Col(pub PatchGeometry);

/// Adjoint of [`Im2Col`]: overlapping patches are summed back into the image.
#[derive(Clone, Copy, Debug)]
pub struct Col2Im(pub PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let dims = layout.shape().dims();
        if dims.len() != 4 || dims[1] != g.channels || dims[2] != g.height || dims[3] != g.width {
            candle_core::bail!("im2col: input {dims:?} does not match {g:?}");
        }
        let batch = dims[0];
        let (oh, ow) = g.out_hw();
        let shape = Shape::from((batch, g.rows(), oh * ow));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(gather(g, batch, contiguous(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(gather(g, batch, contiguous(d, layout)?)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let dims = layout.shape().dims();
        let (oh, ow) = g.out_hw();
        if dims.len() != 3 || dims[1] != g.rows() || dims[2] != oh * ow {
            candle_core::bail!("col2im: input {dims:?} does not match {g:?}");
        }
        let batch = dims[0];
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(scatter(g, batch, contiguous(d, layout)?)),
            CpuStorage::F64(d) => CpuStorage::F64(scatter(g, batch, contiguous(d, layout)?)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

pub fn im2col(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (_, channels, height, width) = x.dims4()?;
    let geometry = PatchGeometry {
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
    };
    x.contiguous()?.apply_op1(Im2Col(geometry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn conv_via_patches_matches_reference_conv() {
        let dev = Device::Cpu;
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, 7, 6), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (5, 3, 3, 3), &dev).unwrap();
            let reference = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            let (_, _, oh, ow) = reference.dims4().unwrap();
            let cols = im2col(&x, 3, stride, pad).unwrap();
            let ours = w
                .reshape((5, 27))
                .unwrap()
                .broadcast_matmul(&cols)
                .unwrap()
                .reshape((2, 5, oh, ow))
                .unwrap();
            let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 6, 5), &dev).unwrap();
        let cols = im2col(&x, 3, 2, 1).unwrap();
        let y = Tensor::randn(0f64, 1.0, cols.dims(), &dev).unwrap();
        let (_, _, h, w) = x.dims4().unwrap();
        let g = PatchGeometry {
            channels: 3,
            height: h,
            width: w,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let back = y.apply_op1(Col2Im(g)).unwrap();
        let lhs = (cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x * back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn gradient_matches_reference_conv_gradient() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (1, 2, 5, 5), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (4, 2, 3, 3), &dev).unwrap();
        let ours = w
            .reshape((4, 18))
            .unwrap()
            .broadcast_matmul(&im2col(x.as_tensor(), 3, 1, 1).unwrap())
            .unwrap();
        let g1 = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let reference = x.as_tensor().conv2d(&w, 1, 1, 1, 1).unwrap();
        let g2 = reference.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let d = (g1.get(&x).unwrap() - g2.get(&x).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-10, "{d}");
    }
}
