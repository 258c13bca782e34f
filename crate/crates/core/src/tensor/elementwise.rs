use super::{debug_assert_finite, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
    Log,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn pointwise<T: Scalar>(kind: Pointwise, input: &Tensor<T>) -> Result<Tensor<T>> {
    let out = match kind {
        Pointwise::Relu => input.map(|v| v.max(T::zero())),
        Pointwise::Sigmoid => input.map(sigmoid),
        Pointwise::Log => {
            if let Some((index, &value)) = input
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| !(**v > T::zero()))
            {
                return Err(Error::Domain {
                    op: "log",
                    index,
                    value: value.as_f64(),
                });
            }
            input.map(|v| v.ln())
        }
    };
    debug_assert_finite("pointwise", &out);
    Ok(out)
}

/// Gradient w.r.t. the input given the forward input, forward output and the
/// upstream gradient.
pub fn pointwise_backward<T: Scalar>(
    kind: Pointwise,
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    input.expect_same_dims("pointwise_backward", grad_out)?;
    output.expect_same_dims("pointwise_backward", grad_out)?;
    let g = grad_out.data();
    let data = match kind {
        Pointwise::Relu => input
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect(),
        Pointwise::Sigmoid => output
            .data()
            .iter()
            .zip(g)
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect(),
        Pointwise::Log => input.data().iter().zip(g).map(|(&x, &g)| g / x).collect(),
    };
    Tensor::new(input.dims(), data)
}

/// Per-pixel softmax over the leading (channel) axis of `[C,H,W]`.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_rank("softmax_channels", "input", 3)?;
    let c = input.dims()[0];
    if c < 2 {
        return Err(Error::shape("softmax_channels", "need at least 2 channels"));
    }
    let plane = input.len() / c;
    let mut max = input.outer(0).to_vec();
    for ch in 1..c {
        max.iter_mut()
            .zip(input.outer(ch))
            .for_each(|(m, &v)| *m = m.max(v));
    }
    let mut out = Tensor::zeros(input.dims());
    let mut sum = vec![T::zero(); plane];
    for ch in 0..c {
        let src = input.outer(ch);
        let dst = out.outer_mut(ch);
        for i in 0..plane {
            let e = (src[i] - max[i]).exp();
            dst[i] = e;
            sum[i] += e;
        }
    }
    for ch in 0..c {
        out.outer_mut(ch)
            .iter_mut()
            .zip(&sum)
            .for_each(|(v, &s)| *v /= s);
    }
    debug_assert_finite("softmax_channels", &out);
    Ok(out)
}

/// Maps a gradient w.r.t. softmax probabilities to one w.r.t. the logits.
pub fn softmax_channels_backward<T: Scalar>(
    probs: &Tensor<T>,
    grad_probs: &Tensor<T>,
) -> Result<Tensor<T>> {
    probs.expect_same_dims("softmax_channels_backward", grad_probs)?;
    probs.expect_rank("softmax_channels_backward", "probs", 3)?;
    let c = probs.dims()[0];
    let plane = probs.len() / c;
    let mut inner = vec![T::zero(); plane];
    for ch in 0..c {
        let (p, g) = (probs.outer(ch), grad_probs.outer(ch));
        for i in 0..plane {
            inner[i] += p[i] * g[i];
        }
    }
    let mut out = Tensor::zeros(probs.dims());
    for ch in 0..c {
        let (p, g) = (probs.outer(ch), grad_probs.outer(ch));
        let dst = out.outer_mut(ch);
        for i in 0..plane {
            dst[i] = p[i] * (g[i] - inner[i]);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// Halves both spatial axes, averaging 2×2 blocks.
    AvgPool2,
    /// Doubles both spatial axes by replication.
    NearestUp2,
}

fn spatial(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    let d = t.dims();
    if d.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 axes, got {d:?}")));
    }
    let (h, w) = (d[d.len() - 2], d[d.len() - 1]);
    Ok((t.len() / (h * w), h, w))
}

fn with_spatial(dims: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut out = dims.to_vec();
    let n = out.len();
    out[n - 2] = h;
    out[n - 1] = w;
    out
}

/// Operates on the last two axes; leading axes are treated as a batch.
pub fn resample<T: Scalar>(kind: Resample, input: &Tensor<T>) -> Result<Tensor<T>> {
    let (planes, h, w) = spatial("resample", input)?;
    match kind {
        Resample::AvgPool2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    "resample",
                    format!("avgpool2 needs even spatial dims, got {h}x{w}"),
                ));
            }
            let (ho, wo) = (h / 2, w / 2);
            let quarter = T::of(0.25);
            let mut out = Tensor::zeros(&with_spatial(input.dims(), ho, wo));
            let src = input.data();
            let dst = out.data_mut();
            for p in 0..planes {
                for y in 0..ho {
                    let r0 = &src[(p * h + 2 * y) * w..(p * h + 2 * y + 1) * w];
                    let r1 = &src[(p * h + 2 * y + 1) * w..(p * h + 2 * y + 2) * w];
                    let d = &mut dst[(p * ho + y) * wo..(p * ho + y + 1) * wo];
                    for x in 0..wo {
                        d[x] = (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
                    }
                }
            }
            Ok(out)
        }
        Resample::NearestUp2 => {
            let (ho, wo) = (2 * h, 2 * w);
            let mut out = Tensor::zeros(&with_spatial(input.dims(), ho, wo));
            let src = input.data();
            let dst = out.data_mut();
            for p in 0..planes {
                for y in 0..h {
                    let s = &src[(p * h + y) * w..(p * h + y + 1) * w];
                    let base = (p * ho + 2 * y) * wo;
                    let (d0, d1) = dst[base..base + 2 * wo].split_at_mut(wo);
                    for x in 0..w {
                        d0[2 * x] = s[x];
                        d0[2 * x + 1] = s[x];
                    }
                    d1.copy_from_slice(d0);
                }
            }
            Ok(out)
        }
    }
}

/// Gradient of [`resample`] w.r.t. its input.
pub fn resample_backward<T: Scalar>(kind: Resample, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    match kind {
        // avgpool2 is nearest_up2 transposed, scaled by 1/4.
        Resample::AvgPool2 => {
            let mut g = resample(Resample::NearestUp2, grad_out)?;
            g.scale(T::of(0.25));
            Ok(g)
        }
        Resample::NearestUp2 => {
            let mut g = resample(Resample::AvgPool2, grad_out)?;
            g.scale(T::of(4.0));
            Ok(g)
        }
    }
}

/// Stacks `[Ca,H,W]` and `[Cb,H,W]` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank("concat_channels", "first operand", 3)?;
    b.expect_rank("concat_channels", "second operand", 3)?;
    if a.dims()[1..] != b.dims()[1..] {
        return Err(Error::shape(
            "concat_channels",
            format!("spatial dims differ: {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[a.dims()[0] + b.dims()[0], a.dims()[1], a.dims()[2]], data)
}

/// Inverse of [`concat_channels`]: splits after the first `channels` channels.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    t.expect_rank("split_channels", "input", 3)?;
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    if channels == 0 || channels >= c {
        return Err(Error::shape(
            "split_channels",
            format!("cannot split {c} channels at {channels}"),
        ));
    }
    let (x, y) = t.data().split_at(channels * h * w);
    Ok((
        Tensor::new(&[channels, h, w], x.to_vec())?,
        Tensor::new(&[c - channels, h, w], y.to_vec())?,
    ))
}

/// Mean over the spatial axes of `[C,H,W]`, giving `[C]`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_rank("global_avg_pool", "input", 3)?;
    let c = input.dims()[0];
    let n = T::of((input.len() / c) as f64);
    Tensor::new(&[c], (0..c).map(|ch| input.outer(ch).iter().copied().sum::<T>() / n).collect())
}

pub fn global_avg_pool_backward<T: Scalar>(dims: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if dims.len() != 3 || grad_out.dims() != [dims[0]] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("input {dims:?} vs upstream {:?}", grad_out.dims()),
        ));
    }
    let plane = dims[1] * dims[2];
    let inv = T::one() / T::of(plane as f64);
    let mut out = Tensor::zeros(dims);
    for (ch, &g) in grad_out.data().iter().enumerate() {
        out.outer_mut(ch).iter_mut().for_each(|v| *v = g * inv);
    }
    Ok(out)
}

/// Per-channel maximum of a `[C, H, W]` tensor and the flat in-plane index
/// where it occurs (first one on ties).
pub fn global_max_pool<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    input.expect_rank("global_max_pool", "input", 3)?;
    let c = input.dims()[0];
    let mut vals = Vec::with_capacity(c);
    let mut at = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = input.outer(ch);
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        vals.push(plane[best]);
        at.push(best);
    }
    Ok((Tensor::new(&[c], vals)?, at))
}

pub fn global_max_pool_backward<T: Scalar>(
    dims: &[usize],
    at: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if dims.len() != 3 || grad_out.dims() != [dims[0]] || at.len() != dims[0] {
        return Err(Error::shape(
            "global_max_pool_backward",
            format!("input {dims:?} vs upstream {:?}", grad_out.dims()),
        ));
    }
    let mut out = Tensor::zeros(dims);
    for (ch, (&g, &i)) in grad_out.data().iter().zip(at).enumerate() {
        out.outer_mut(ch)[i] = g;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_linear<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(usize, usize)> {
    input.expect_rank(op, "input", 1)?;
    weight.expect_rank(op, "weight", 2)?;
    let (dout, din) = (weight.dims()[0], weight.dims()[1]);
    if input.len() != din {
        return Err(Error::shape(
            op,
            format!("weight expects {din} inputs, got {}", input.len()),
        ));
    }
    Ok((dout, din))
}

/// `y = W·x + b`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (dout, din) = check_linear("linear", input, weight)?;
    if bias.dims() != [dout] {
        return Err(Error::shape(
            "linear",
            format!("bias must be [{dout}], got {:?}", bias.dims()),
        ));
    }
    let x = input.data();
    let data = (0..dout)
        .map(|o| {
            let row = &weight.data()[o * din..(o + 1) * din];
            row.iter().zip(x).map(|(&w, &x)| w * x).sum::<T>() + bias.data()[o]
        })
        .collect();
    Tensor::new(&[dout], data)
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (dout, din) = check_linear("linear_backward", input, weight)?;
    if grad_out.dims() != [dout] {
        return Err(Error::shape(
            "linear_backward",
            format!("upstream must be [{dout}], got {:?}", grad_out.dims()),
        ));
    }
    let g = grad_out.data();
    let mut grad_in = vec![T::zero(); din];
    let mut grad_w = vec![T::zero(); dout * din];
    for o in 0..dout {
        let row = &weight.data()[o * din..(o + 1) * din];
        for i in 0..din {
            grad_in[i] += row[i] * g[o];
            grad_w[o * din + i] = g[o] * input.data()[i];
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(&[din], grad_in)?,
        weight: Tensor::new(&[dout, din], grad_w)?,
        bias: grad_out.clone(),
    })
}

/// Plain gradient step `param ← param − lr·grad`, in place.
pub fn sgd_update<T: Scalar>(param: &mut Tensor<T>, grad: &Tensor<T>, lr: T) -> Result<()> {
    param.expect_same_dims("sgd_update", grad)?;
    param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .for_each(|(p, &g)| *p -= lr * g);
    Ok(())
}
