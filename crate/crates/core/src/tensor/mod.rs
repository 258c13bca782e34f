//! Dense row-major tensors and the hand-written forward/backward kernels the
//! lane network is composed from.
//!
//! There is no tape or graph: every layer exposes a forward function and a
//! matching backward function, and callers chain them explicitly. All kernels
//! are generic over [`Scalar`] so the same code runs in `f32` for training and
//! in `f64` for finite-difference gradient checks.

mod conv;
mod elementwise;
mod gemm;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

pub use conv::{conv1d_rows, conv1d_rows_backward, conv2d, conv2d_backward, ConvGrads};
pub use elementwise::{
    concat_channels, global_avg_pool, global_avg_pool_backward, global_max_pool,
    global_max_pool_backward, linear, linear_backward,
    pointwise, pointwise_backward, resample, resample_backward, sgd_update, softmax_channels,
    softmax_channels_backward, split_channels, LinearGrads, Pointwise, Resample,
};

/// Maximum number of axes a tensor may carry.
pub const MAX_RANK: usize = 4;

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b (+ c if accumulate)` on raw strided buffers.
    ///
    /// # Safety
    /// The strides must describe in-bounds accesses for `m×k`, `k×n` and
    /// `m×n` matrices rooted at the given pointers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A dense, row-major array of up to four axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: &[usize], data: Vec<T>) -> Result<Self> {
        check_dims("Tensor::new", dims)?;
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("dims {dims:?} need {len} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Panics on invalid dims; for shapes known statically to be valid.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        check_dims("Tensor::full", dims).expect("invalid tensor dims");
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_dims("Tensor::from_fn", dims).expect("invalid tensor dims");
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.dims)
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        check_dims("reshape", dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims("add_assign", other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// `self += s·other`
    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        self.expect_same_dims("add_scaled", other)?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += s * b);
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_dims("dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Contiguous sub-tensor `index` along the leading axis.
    pub fn outer(&self, index: usize) -> &[T] {
        let step = self.data.len() / self.dims[0];
        &self.data[index * step..(index + 1) * step]
    }

    pub fn outer_mut(&mut self, index: usize) -> &mut [T] {
        let step = self.data.len() / self.dims[0];
        &mut self.data[index * step..(index + 1) * step]
    }

    pub(crate) fn expect_same_dims(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, what: &str, rank: usize) -> Result<()> {
        if self.dims.len() != rank {
            return Err(Error::shape(
                op,
                format!("{what} must have {rank} axes, got {:?}", self.dims),
            ));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform init in `[-√(6/fan_in), √(6/fan_in)]`.
pub fn kaiming_uniform<T: Scalar>(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(dims, |_| T::of(rng.random_range(-bound..bound)))
}

fn check_dims(op: &'static str, dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::shape(
            op,
            format!("rank must be 1..={MAX_RANK}, got {dims:?}"),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::shape(op, format!("zero-length axis in {dims:?}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn debug_assert_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) {
    debug_assert!(t.all_finite(), "{op} produced a non-finite value");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length_and_rank() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(&[0], vec![]).is_err());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32);
        let r = t.clone().reshape(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4]).is_err());
    }

    #[test]
    fn cast_round_trip() {
        let t = Tensor::<f32>::from_fn(&[4], |i| i as f32 * 0.25);
        let back: Tensor<f32> = t.cast::<f64>().cast();
        assert_eq!(back, t);
    }
}
