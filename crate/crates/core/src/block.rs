//! Trainable HT-IHT feature block.
//!
//! `f → relu(reduce) → HT → relu(conv_ρ) → relu(conv_ρ) → IHT`, concatenated
//! with `f` and merged back to the input channel count by a 1×1 convolution.
//! The Hough-space convolutions slide only along the offset axis, so each
//! angle row is filtered independently.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hough::VoteTable;
use crate::tensor::{
    concat_channels, conv1d_rows, conv1d_rows_backward, conv2d, conv2d_backward,
    kaiming_uniform, pointwise, pointwise_backward, split_channels, Pointwise, Scalar, Tensor,
};

/// Feature channels entering and leaving the block in the lane network.
pub const BLOCK_CHANNELS: usize = 32;
/// Channels carried through Hough space.
pub const HOUGH_CHANNELS: usize = 8;
/// Tap count of the offset-axis convolutions.
pub const RHO_KERNEL: usize = 9;

#[derive(Clone, Debug, PartialEq)]
pub struct HtIhtParams<T = f32> {
    /// `[C_ht, C_in, 1, 1]`, no bias.
    pub reduce_w: Tensor<T>,
    /// `[C_ht, C_ht, k]`
    pub rho1_w: Tensor<T>,
    pub rho1_b: Tensor<T>,
    pub rho2_w: Tensor<T>,
    pub rho2_b: Tensor<T>,
    /// `[C_in, C_in + C_ht, 1, 1]`
    pub merge_w: Tensor<T>,
    pub merge_b: Tensor<T>,
}

impl<T: Scalar> HtIhtParams<T> {
    pub fn init(c_in: usize, c_ht: usize, rho_kernel: usize, rng: &mut impl Rng) -> Self {
        HtIhtParams {
            reduce_w: kaiming_uniform(&[c_ht, c_in, 1, 1], c_in, rng),
            rho1_w: kaiming_uniform(&[c_ht, c_ht, rho_kernel], c_ht * rho_kernel, rng),
            rho1_b: Tensor::zeros(&[c_ht]),
            rho2_w: kaiming_uniform(&[c_ht, c_ht, rho_kernel], c_ht * rho_kernel, rng),
            rho2_b: Tensor::zeros(&[c_ht]),
            merge_w: kaiming_uniform(&[c_in, c_in + c_ht, 1, 1], c_in + c_ht, rng),
            merge_b: Tensor::zeros(&[c_in]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(Tensor::zeros_like)
    }

    pub fn in_channels(&self) -> usize {
        self.reduce_w.dims()[1]
    }

    pub fn hough_channels(&self) -> usize {
        self.reduce_w.dims()[0]
    }

    fn rho_pad(&self) -> usize {
        self.rho1_w.dims()[2] / 2
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 7] {
        [
            ("reduce.w", &self.reduce_w),
            ("rho1.w", &self.rho1_w),
            ("rho1.b", &self.rho1_b),
            ("rho2.w", &self.rho2_w),
            ("rho2.b", &self.rho2_b),
            ("merge.w", &self.merge_w),
            ("merge.b", &self.merge_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 7] {
        [
            ("reduce.w", &mut self.reduce_w),
            ("rho1.w", &mut self.rho1_w),
            ("rho1.b", &mut self.rho1_b),
            ("rho2.w", &mut self.rho2_w),
            ("rho2.b", &mut self.rho2_b),
            ("merge.w", &mut self.merge_w),
            ("merge.b", &mut self.merge_b),
        ]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&Tensor<T>) -> Tensor<U>) -> HtIhtParams<U> {
        HtIhtParams {
            reduce_w: f(&self.reduce_w),
            rho1_w: f(&self.rho1_w),
            rho1_b: f(&self.rho1_b),
            rho2_w: f(&self.rho2_w),
            rho2_b: f(&self.rho2_b),
            merge_w: f(&self.merge_w),
            merge_b: f(&self.merge_b),
        }
    }
}

/// Nonlinearity used between stages. `Identity` exists to test linearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Relu => pointwise(Pointwise::Relu, x),
            Activation::Identity => Ok(x.clone()),
        }
    }

    fn backward<T: Scalar>(self, pre: &Tensor<T>, post: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Relu => pointwise_backward(Pointwise::Relu, pre, post, grad),
            Activation::Identity => Ok(grad.clone()),
        }
    }
}

/// Intermediate activations of one [`block_forward`] call.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    activation: Activation,
    input: Tensor<T>,
    reduce_pre: Tensor<T>,
    reduced: Tensor<T>,
    hough: Tensor<T>,
    rho1_pre: Tensor<T>,
    rho1: Tensor<T>,
    rho2_pre: Tensor<T>,
    rho2: Tensor<T>,
    concat: Tensor<T>,
    merge_pre: Tensor<T>,
    output: Tensor<T>,
}

impl<T> BlockCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    /// Hough maps `[C_ht, n_theta, n_rho]` after the offset-axis convolutions.
    pub fn hough_features(&self) -> &Tensor<T> {
        &self.rho2
    }
}

fn stage<X>(stage: &'static str, r: Result<X>) -> Result<X> {
    r.map_err(|e| match e {
        Error::Shape { op, detail } => Error::shape(op, format!("[{stage}] {detail}")),
        other => other,
    })
}

pub fn block_forward<T: Scalar>(
    params: &HtIhtParams<T>,
    table: &VoteTable,
    f: &Tensor<T>,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    block_forward_with(params, table, f, Activation::Relu)
}

pub fn block_forward_with<T: Scalar>(
    params: &HtIhtParams<T>,
    table: &VoteTable,
    f: &Tensor<T>,
    act: Activation,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let pad = params.rho_pad();
    let reduce_pre = stage("reduce", conv2d(f, &params.reduce_w, None, 1, 0))?;
    let reduced = act.apply(&reduce_pre)?;
    let hough = stage("hough", table.ht_forward(&reduced))?;
    let rho1_pre = stage(
        "rho1",
        conv1d_rows(&hough, &params.rho1_w, Some(&params.rho1_b), pad),
    )?;
    let rho1 = act.apply(&rho1_pre)?;
    let rho2_pre = stage(
        "rho2",
        conv1d_rows(&rho1, &params.rho2_w, Some(&params.rho2_b), pad),
    )?;
    let rho2 = act.apply(&rho2_pre)?;
    let inverse = stage("inverse hough", table.iht_forward(&rho2))?;
    let concat = stage("concat", concat_channels(f, &inverse))?;
    let merge_pre = stage(
        "merge",
        conv2d(&concat, &params.merge_w, Some(&params.merge_b), 1, 0),
    )?;
    let output = act.apply(&merge_pre)?;
    let cache = BlockCache {
        activation: act,
        input: f.clone(),
        reduce_pre,
        reduced,
        hough,
        rho1_pre,
        rho1,
        rho2_pre,
        rho2,
        concat,
        merge_pre,
        output: output.clone(),
    };
    Ok((output, cache))
}

/// Reverse pass; returns the input gradient and the parameter gradients.
pub fn block_backward<T: Scalar>(
    params: &HtIhtParams<T>,
    table: &VoteTable,
    cache: &BlockCache<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, HtIhtParams<T>)> {
    if upstream.dims() != cache.output.dims() {
        return Err(Error::shape(
            "block_backward",
            format!(
                "upstream {:?} does not match cached output {:?}",
                upstream.dims(),
                cache.output.dims()
            ),
        ));
    }
    let act = cache.activation;
    let pad = params.rho_pad();

    let d_merge_pre = act.backward(&cache.merge_pre, &cache.output, upstream)?;
    let merge = conv2d_backward(&cache.concat, &params.merge_w, 1, 0, &d_merge_pre)?;
    let (d_direct, d_inverse) = split_channels(&merge.input, params.in_channels())?;

    let d_rho2 = table.iht_backward(&d_inverse)?;
    let d_rho2_pre = act.backward(&cache.rho2_pre, &cache.rho2, &d_rho2)?;
    let rho2 = conv1d_rows_backward(&cache.rho1, &params.rho2_w, pad, &d_rho2_pre)?;

    let d_rho1_pre = act.backward(&cache.rho1_pre, &cache.rho1, &rho2.input)?;
    let rho1 = conv1d_rows_backward(&cache.hough, &params.rho1_w, pad, &d_rho1_pre)?;

    let d_reduced = table.ht_backward(&rho1.input)?;
    let d_reduce_pre = act.backward(&cache.reduce_pre, &cache.reduced, &d_reduced)?;
    let reduce = conv2d_backward(&cache.input, &params.reduce_w, 1, 0, &d_reduce_pre)?;

    let mut d_input = d_direct;
    d_input.add_assign(&reduce.input)?;

    Ok((
        d_input,
        HtIhtParams {
            reduce_w: reduce.kernels,
            rho1_w: rho1.kernels,
            rho1_b: rho1.bias,
            rho2_w: rho2.kernels,
            rho2_b: rho2.bias,
            merge_w: merge.kernels,
            merge_b: merge.bias,
        },
    ))
}
