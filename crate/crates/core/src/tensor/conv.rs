//! 2D and row-wise 1D cross-correlation via im2col + GEMM.

use super::gemm::{gemm, Operand};
use super::{debug_assert_finite, Scalar, Tensor};
use crate::error::{Error, Result};

/// Gradients of a convolution with respect to its three inputs.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sy: usize,
    sx: usize,
    py: usize,
    px: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sy == 1 && self.sx == 1 && self.py == 0 && self.px == 0
    }

    /// Output columns `ox` whose input column `ox·sx + kx − px` is in range.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = self.px.saturating_sub(kx).div_ceil(self.sx);
        let hi_num = self.w + self.px;
        let hi = if hi_num > kx {
            ((hi_num - kx - 1) / self.sx + 1).min(self.wo)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn out_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be at least 1"));
    }
    if size + 2 * pad < k {
        return Err(Error::shape(
            op,
            format!("kernel extent {k} exceeds padded input extent {}", size + 2 * pad),
        ));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn im2col<T: Scalar>(g: &Geometry, input: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let mut cols = vec![T::zero(); g.patch() * plane];
    for ci in 0..g.cin {
        let chan = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.sy + ky) as isize - g.py as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.sx == 1 {
                        let start = lo + kx - g.px;
                        out_row[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out_row[ox] = src[ox * g.sx + kx - g.px];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(g: &Geometry, cols: &[T], grad_in: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let chan = &mut grad_in[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.sy + ky) as isize - g.py as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let in_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.sx == 1 {
                        let start = lo + kx - g.px;
                        dst[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&in_row[lo..hi])
                            .for_each(|(d, &s)| *d += s);
                    } else {
                        for ox in lo..hi {
                            dst[ox * g.sx + kx - g.px] += in_row[ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward<T: Scalar>(
    g: &Geometry,
    input: &[T],
    kernels: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.cout * plane];
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };
    gemm(
        Operand::plain(kernels, g.cout, g.patch()),
        Operand::plain(cols, g.patch(), plane),
        &mut out,
        false,
    );
    if let Some(bias) = bias {
        for (co, &b) in bias.iter().enumerate() {
            out[co * plane..(co + 1) * plane]
                .iter_mut()
                .for_each(|v| *v += b);
        }
    }
    out
}

fn backward<T: Scalar>(
    g: &Geometry,
    input: &[T],
    kernels: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = g.out_plane();
    let patch = g.patch();
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };

    let mut grad_k = vec![T::zero(); g.cout * patch];
    gemm(
        Operand::plain(grad_out, g.cout, plane),
        Operand::transposed(cols, plane, patch),
        &mut grad_k,
        false,
    );

    let grad_b = (0..g.cout)
        .map(|co| grad_out[co * plane..(co + 1) * plane].iter().copied().sum())
        .collect();

    let mut grad_cols = vec![T::zero(); patch * plane];
    gemm(
        Operand::transposed(kernels, patch, g.cout),
        Operand::plain(grad_out, g.cout, plane),
        &mut grad_cols,
        false,
    );
    let grad_in = if g.is_pointwise() {
        grad_cols
    } else {
        let mut grad_in = vec![T::zero(); g.cin * g.h * g.w];
        col2im(g, &grad_cols, &mut grad_in);
        grad_in
    };
    (grad_in, grad_k, grad_b)
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.dims() != [cout] {
            return Err(Error::shape(
                op,
                format!("bias must be [{cout}], got {:?}", b.dims()),
            ));
        }
    }
    Ok(())
}

fn conv2d_geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    input.expect_rank(op, "input", 3)?;
    kernels.expect_rank(op, "kernels", 4)?;
    let (cin, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let kd = kernels.dims();
    if kd[1] != cin {
        return Err(Error::shape(
            op,
            format!("kernel input channels {} != input channels {cin}", kd[1]),
        ));
    }
    if kd[2] != kd[3] || kd[2] % 2 == 0 {
        return Err(Error::shape(
            op,
            format!("kernel must be square with odd size, got {}x{}", kd[2], kd[3]),
        ));
    }
    let k = kd[2];
    Ok(Geometry {
        cin,
        h,
        w,
        cout: kd[0],
        kh: k,
        kw: k,
        sy: stride,
        sx: stride,
        py: pad,
        px: pad,
        ho: out_extent(op, h, k, stride, pad)?,
        wo: out_extent(op, w, k, stride, pad)?,
    })
}

/// Zero-padded 2D cross-correlation of `[Cin,H,W]` with `[Cout,Cin,k,k]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geometry("conv2d", input, kernels, stride, pad)?;
    check_bias("conv2d", bias, g.cout)?;
    let out = forward(&g, input.data(), kernels.data(), bias.map(|b| b.data()));
    let out = Tensor::new(&[g.cout, g.ho, g.wo], out)?;
    debug_assert_finite("conv2d", &out);
    Ok(out)
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = conv2d_geometry("conv2d_backward", input, kernels, stride, pad)?;
    if grad_out.dims() != [g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient must be {:?}, got {:?}",
                [g.cout, g.ho, g.wo],
                grad_out.dims()
            ),
        ));
    }
    let (gi, gk, gb) = backward(&g, input.data(), kernels.data(), grad_out.data());
    Ok(ConvGrads {
        input: Tensor::new(input.dims(), gi)?,
        kernels: Tensor::new(kernels.dims(), gk)?,
        bias: Tensor::new(&[g.cout], gb)?,
    })
}

fn conv1d_geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    pad: usize,
) -> Result<Geometry> {
    input.expect_rank(op, "input", 3)?;
    kernels.expect_rank(op, "kernels", 3)?;
    let (c, r, l) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let kd = kernels.dims();
    if kd[1] != c {
        return Err(Error::shape(
            op,
            format!("kernel input channels {} != input channels {c}", kd[1]),
        ));
    }
    if kd[2] % 2 == 0 {
        return Err(Error::shape(op, format!("kernel size must be odd, got {}", kd[2])));
    }
    Ok(Geometry {
        cin: c,
        h: r,
        w: l,
        cout: kd[0],
        kh: 1,
        kw: kd[2],
        sy: 1,
        sx: 1,
        py: 0,
        px: pad,
        ho: r,
        wo: out_extent(op, l, kd[2], 1, pad)?,
    })
}

/// Cross-correlation along the last axis of `[C,R,L]`; rows are independent.
pub fn conv1d_rows<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv1d_geometry("conv1d_rows", input, kernels, pad)?;
    check_bias("conv1d_rows", bias, g.cout)?;
    let out = forward(&g, input.data(), kernels.data(), bias.map(|b| b.data()));
    let out = Tensor::new(&[g.cout, g.ho, g.wo], out)?;
    debug_assert_finite("conv1d_rows", &out);
    Ok(out)
}

pub fn conv1d_rows_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = conv1d_geometry("conv1d_rows_backward", input, kernels, pad)?;
    if grad_out.dims() != [g.cout, g.ho, g.wo] {
        return Err(Error::shape(
            "conv1d_rows_backward",
            format!(
                "upstream gradient must be {:?}, got {:?}",
                [g.cout, g.ho, g.wo],
                grad_out.dims()
            ),
        ));
    }
    let (gi, gk, gb) = backward(&g, input.data(), kernels.data(), grad_out.data());
    Ok(ConvGrads {
        input: Tensor::new(input.dims(), gi)?,
        kernels: Tensor::new(kernels.dims(), gk)?,
        bias: Tensor::new(&[g.cout], gb)?,
    })
}
