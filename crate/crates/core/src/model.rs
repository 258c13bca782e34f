//! Compact encoder–decoder lane network with the HT-IHT block at its
//! bottleneck.
//!
//! Layout for a `1×4H×4W` input and an `H×W` vote table:
//!
//! ```text
//! enc1 (1→16, k3, s2) → enc2 (16→32, k3, s2) → enc3 (32→32, k3)   features 32×H×W
//! HT-IHT block                                                    32×H×W
//! ├─ up2 → dec1 (32→16, k3) → up2 → dec2 (16→8, k3) → head (8→K+1, k1)  logits
//! └─ global average pool → linear (32→K) → sigmoid                 lane existence
//! ```
//!
//! Output channel 0 is background; channel `c ≥ 1` carries lane `c`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::{
    block_backward, block_forward, BlockCache, HtIhtParams, BLOCK_CHANNELS, HOUGH_CHANNELS,
    RHO_KERNEL,
};
use crate::error::{Error, Result};
use crate::hough::VoteTable;
use crate::tensor::{
    conv2d, conv2d_backward, global_max_pool, global_max_pool_backward, kaiming_uniform, linear,
    linear_backward, pointwise, pointwise_backward, resample, resample_backward, sgd_update,
    softmax_channels, Pointwise, Resample, Scalar, Tensor,
};

/// Maximum number of lanes per scene; one segmentation channel each.
pub const MAX_LANES: usize = 4;
/// Spatial reduction between the input image and the Hough features.
pub const DOWNSAMPLE: usize = 4;

const ENC1: usize = 16;
const DEC1: usize = 16;
const DEC2: usize = 8;

/// Every learnable tensor of the lane network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub enc1_w: Tensor<T>,
    pub enc1_b: Tensor<T>,
    pub enc2_w: Tensor<T>,
    pub enc2_b: Tensor<T>,
    pub enc3_w: Tensor<T>,
    pub enc3_b: Tensor<T>,
    pub block: HtIhtParams<T>,
    pub dec1_w: Tensor<T>,
    pub dec1_b: Tensor<T>,
    pub dec2_w: Tensor<T>,
    pub dec2_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    pub exist_w: Tensor<T>,
    pub exist_b: Tensor<T>,
}

/// Deterministic fan-in scaled init; biases start at zero.
pub fn init_params<T: Scalar>(seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = BLOCK_CHANNELS;
    let k = MAX_LANES;
    let enc1_w = kaiming_uniform(&[ENC1, 1, 3, 3], 9, &mut rng);
    let enc2_w = kaiming_uniform(&[c, ENC1, 3, 3], ENC1 * 9, &mut rng);
    let enc3_w = kaiming_uniform(&[c, c, 3, 3], c * 9, &mut rng);
    let block = HtIhtParams::init(c, HOUGH_CHANNELS, RHO_KERNEL, &mut rng);
    let dec1_w = kaiming_uniform(&[DEC1, c, 3, 3], c * 9, &mut rng);
    let dec2_w = kaiming_uniform(&[DEC2, DEC1, 3, 3], DEC1 * 9, &mut rng);
    let head_w = kaiming_uniform(&[k + 1, DEC2, 1, 1], DEC2, &mut rng);
    let exist_w = kaiming_uniform(&[k, c], c, &mut rng);
    ModelParams {
        enc1_w,
        enc1_b: Tensor::zeros(&[ENC1]),
        enc2_w,
        enc2_b: Tensor::zeros(&[c]),
        enc3_w,
        enc3_b: Tensor::zeros(&[c]),
        block,
        dec1_w,
        dec1_b: Tensor::zeros(&[DEC1]),
        dec2_w,
        dec2_b: Tensor::zeros(&[DEC2]),
        head_w,
        head_b: Tensor::zeros(&[k + 1]),
        exist_w,
        exist_b: Tensor::zeros(&[k]),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// All tensors with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("enc1.w".into(), &self.enc1_w),
            ("enc1.b".into(), &self.enc1_b),
            ("enc2.w".into(), &self.enc2_w),
            ("enc2.b".into(), &self.enc2_b),
            ("enc3.w".into(), &self.enc3_w),
            ("enc3.b".into(), &self.enc3_b),
        ];
        out.extend(
            self.block
                .tensors()
                .into_iter()
                .map(|(n, t)| (format!("ht.{n}"), t)),
        );
        out.extend([
            ("dec1.w".into(), &self.dec1_w),
            ("dec1.b".into(), &self.dec1_b),
            ("dec2.w".into(), &self.dec2_w),
            ("dec2.b".into(), &self.dec2_b),
            ("head.w".into(), &self.head_w),
            ("head.b".into(), &self.head_b),
            ("exist.w".into(), &self.exist_w),
            ("exist.b".into(), &self.exist_b),
        ]);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("enc1.w".into(), &mut self.enc1_w),
            ("enc1.b".into(), &mut self.enc1_b),
            ("enc2.w".into(), &mut self.enc2_w),
            ("enc2.b".into(), &mut self.enc2_b),
            ("enc3.w".into(), &mut self.enc3_w),
            ("enc3.b".into(), &mut self.enc3_b),
        ];
        out.extend(
            self.block
                .tensors_mut()
                .into_iter()
                .map(|(n, t)| (format!("ht.{n}"), t)),
        );
        out.extend([
            ("dec1.w".into(), &mut self.dec1_w),
            ("dec1.b".into(), &mut self.dec1_b),
            ("dec2.w".into(), &mut self.dec2_w),
            ("dec2.b".into(), &mut self.dec2_b),
            ("head.w".into(), &mut self.head_w),
            ("head.b".into(), &mut self.head_b),
            ("exist.w".into(), &mut self.exist_w),
            ("exist.b".into(), &mut self.exist_b),
        ]);
        out
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&Tensor<T>) -> Tensor<U>) -> ModelParams<U> {
        ModelParams {
            enc1_w: f(&self.enc1_w),
            enc1_b: f(&self.enc1_b),
            enc2_w: f(&self.enc2_w),
            enc2_b: f(&self.enc2_b),
            enc3_w: f(&self.enc3_w),
            enc3_b: f(&self.enc3_b),
            block: self.block.map(&f),
            dec1_w: f(&self.dec1_w),
            dec1_b: f(&self.dec1_b),
            dec2_w: f(&self.dec2_w),
            dec2_b: f(&self.dec2_b),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
            exist_w: f(&self.exist_w),
            exist_b: f(&self.exist_b),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        self.map(Tensor::cast)
    }

    pub fn zeros_like(&self) -> Self {
        self.map(Tensor::zeros_like)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for (_, t) in self.named_mut() {
            t.scale(s);
        }
    }

    /// Euclidean norm over every scalar, accumulated in f64.
    pub fn l2_norm(&self) -> f64 {
        self.named()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.as_f64().powi(2)))
            .sum::<f64>()
            .sqrt()
    }

    /// One plain SGD step with `grads`.
    pub fn sgd_step(&mut self, grads: &Self, lr: T) -> Result<()> {
        for ((_, p), (_, g)) in self.named_mut().into_iter().zip(grads.named()) {
            sgd_update(p, g, lr)?;
        }
        Ok(())
    }

    /// Concatenation of every tensor's data in [`Self::named`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.named()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Inverse of [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape(
                "assign_flat",
                format!("expected {} scalars, got {}", self.num_scalars(), flat.len()),
            ));
        }
        let mut offset = 0;
        for (_, t) in self.named_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T = f32> {
    /// `[K+1, 4H, 4W]`
    pub seg_logits: Tensor<T>,
    /// Per-pixel softmax of the logits over channels.
    pub seg_probs: Tensor<T>,
    /// `[K]` lane-existence probabilities.
    pub exist_p: Tensor<T>,
    /// Encoder output `[32, H, W]`, before the HT-IHT block.
    pub features: Tensor<T>,
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ModelCache<T> {
    image_dims: Vec<usize>,
    image: Tensor<T>,
    enc1_pre: Tensor<T>,
    enc1: Tensor<T>,
    enc2_pre: Tensor<T>,
    enc2: Tensor<T>,
    enc3_pre: Tensor<T>,
    enc3: Tensor<T>,
    block: BlockCache<T>,
    up1: Tensor<T>,
    dec1_pre: Tensor<T>,
    dec1: Tensor<T>,
    up2: Tensor<T>,
    dec2_pre: Tensor<T>,
    dec2: Tensor<T>,
    pooled: Tensor<T>,
    pooled_at: Vec<usize>,
    exist_p: Tensor<T>,
}

impl<T> ModelCache<T> {
    pub fn block(&self) -> &BlockCache<T> {
        &self.block
    }
}

/// Input image dims `[1, 4H, 4W]` expected for `table`.
pub fn image_dims(table: &VoteTable) -> [usize; 3] {
    let c = table.config();
    [1, DOWNSAMPLE * c.height, DOWNSAMPLE * c.width]
}

fn relu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    pointwise(Pointwise::Relu, x)
}

pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    table: &VoteTable,
) -> Result<(ModelOutput<T>, ModelCache<T>)> {
    let want = image_dims(table);
    if image.dims() != want {
        return Err(Error::shape(
            "model forward",
            format!("image must be {want:?} for this vote table, got {:?}", image.dims()),
        ));
    }
    let p = params;
    let enc1_pre = conv2d(image, &p.enc1_w, Some(&p.enc1_b), 2, 1)?;
    let enc1 = relu(&enc1_pre)?;
    let enc2_pre = conv2d(&enc1, &p.enc2_w, Some(&p.enc2_b), 2, 1)?;
    let enc2 = relu(&enc2_pre)?;
    let enc3_pre = conv2d(&enc2, &p.enc3_w, Some(&p.enc3_b), 1, 1)?;
    let enc3 = relu(&enc3_pre)?;

    let (mid, block) = block_forward(&p.block, table, &enc3)?;

    let up1 = resample(Resample::NearestUp2, &mid)?;
    let dec1_pre = conv2d(&up1, &p.dec1_w, Some(&p.dec1_b), 1, 1)?;
    let dec1 = relu(&dec1_pre)?;
    let up2 = resample(Resample::NearestUp2, &dec1)?;
    let dec2_pre = conv2d(&up2, &p.dec2_w, Some(&p.dec2_b), 1, 1)?;
    let dec2 = relu(&dec2_pre)?;
    let seg_logits = conv2d(&dec2, &p.head_w, Some(&p.head_b), 1, 0)?;
    let seg_probs = softmax_channels(&seg_logits)?;

    let (pooled, pooled_at) = global_max_pool(&mid)?;
    let exist_logits = linear(&pooled, &p.exist_w, &p.exist_b)?;
    let exist_p = pointwise(Pointwise::Sigmoid, &exist_logits)?;

    let output = ModelOutput {
        seg_logits,
        seg_probs,
        exist_p: exist_p.clone(),
        features: enc3.clone(),
    };
    let cache = ModelCache {
        image_dims: image.dims().to_vec(),
        image: image.clone(),
        enc1_pre,
        enc1,
        enc2_pre,
        enc2,
        enc3_pre,
        enc3,
        block,
        up1,
        dec1_pre,
        dec1,
        up2,
        dec2_pre,
        dec2,
        pooled,
        pooled_at,
        exist_p,
    };
    Ok((output, cache))
}

/// Forward pass without keeping activations.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    table: &VoteTable,
) -> Result<ModelOutput<T>> {
    forward(params, image, table).map(|(out, _)| out)
}

/// Reverse pass from gradients w.r.t. the segmentation logits and the
/// existence probabilities. Returns parameter gradients and the image gradient.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    table: &VoteTable,
    cache: &ModelCache<T>,
    grad_logits: &Tensor<T>,
    grad_exist_p: &Tensor<T>,
) -> Result<(ModelParams<T>, Tensor<T>)> {
    let p = params;
    let c = cache;
    if grad_exist_p.dims() != c.exist_p.dims() {
        return Err(Error::shape(
            "model backward",
            format!(
                "existence gradient {:?} does not match cached {:?}",
                grad_exist_p.dims(),
                c.exist_p.dims()
            ),
        ));
    }
    let head = conv2d_backward(&c.dec2, &p.head_w, 1, 0, grad_logits)?;
    let d = pointwise_backward(Pointwise::Relu, &c.dec2_pre, &c.dec2, &head.input)?;
    let dec2 = conv2d_backward(&c.up2, &p.dec2_w, 1, 1, &d)?;
    let d = resample_backward(Resample::NearestUp2, &dec2.input)?;
    let d = pointwise_backward(Pointwise::Relu, &c.dec1_pre, &c.dec1, &d)?;
    let dec1 = conv2d_backward(&c.up1, &p.dec1_w, 1, 1, &d)?;
    let mut d_mid = resample_backward(Resample::NearestUp2, &dec1.input)?;

    let exist_p = &c.exist_p;
    let d_exist_logits = pointwise_backward(Pointwise::Sigmoid, exist_p, exist_p, grad_exist_p)?;
    let exist = linear_backward(&c.pooled, &p.exist_w, &d_exist_logits)?;
    d_mid.add_assign(&global_max_pool_backward(d_mid.dims(), &c.pooled_at, &exist.input)?)?;

    let (d_enc3, block) = block_backward(&p.block, table, &c.block, &d_mid)?;

    let d = pointwise_backward(Pointwise::Relu, &c.enc3_pre, &c.enc3, &d_enc3)?;
    let enc3 = conv2d_backward(&c.enc2, &p.enc3_w, 1, 1, &d)?;
    let d = pointwise_backward(Pointwise::Relu, &c.enc2_pre, &c.enc2, &enc3.input)?;
    let enc2 = conv2d_backward(&c.enc1, &p.enc2_w, 2, 1, &d)?;
    let d = pointwise_backward(Pointwise::Relu, &c.enc1_pre, &c.enc1, &enc2.input)?;
    let enc1 = conv2d_backward(&c.image, &p.enc1_w, 2, 1, &d)?;
    debug_assert_eq!(enc1.input.dims(), c.image_dims.as_slice());

    let grads = ModelParams {
        enc1_w: enc1.kernels,
        enc1_b: enc1.bias,
        enc2_w: enc2.kernels,
        enc2_b: enc2.bias,
        enc3_w: enc3.kernels,
        enc3_b: enc3.bias,
        block,
        dec1_w: dec1.kernels,
        dec1_b: dec1.bias,
        dec2_w: dec2.kernels,
        dec2_b: dec2.bias,
        head_w: head.kernels,
        head_b: head.bias,
        exist_w: exist.weight,
        exist_b: exist.bias,
    };
    Ok((grads, enc1.input))
}
