//! Reusable finite-difference suites over every differentiable piece of the
//! crate. Each function draws `seeds` random instances and returns the merged
//! report; callers decide how to assert on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GradCheck, GradReport};
use crate::block::{block_backward, block_forward, HtIhtParams};
use crate::hough::{HoughConfig, VoteTable};
use crate::losses::{ht_loss, lane_loss, seg_loss, total_loss, LossConfig, Supervision};
use crate::mask::IntMask;
use crate::model::{backward, forward, image_dims, init_params, ModelParams};
use crate::tensor::*;

const PER_SEED: usize = 40;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x9e37 ^ seed)
}

fn random(dims: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

fn pick(len: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

/// Checks `d/dx ⟨op(x), r⟩` against `analytic`.
fn check_projection(
    x: &Tensor<f64>,
    r: &Tensor<f64>,
    op: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    analytic: &Tensor<f64>,
    rng: &mut impl Rng,
) -> GradReport {
    let dims = x.dims().to_vec();
    let f = |v: &[f64]| {
        let t = Tensor::new(&dims, v.to_vec()).unwrap();
        op(&t).dot(r).unwrap()
    };
    let idx = pick(x.len(), PER_SEED, rng);
    GradCheck::default().run(f, x.data(), analytic.data(), &idx)
}

pub fn conv2d_ops(seeds: u64) -> GradReport {
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut g = rng(seed);
        let (stride, pad) = [(1, 1), (2, 1), (1, 0), (2, 0)][seed as usize % 4];
        let x = random(&[3, 7, 9], &mut g);
        let k = random(&[4, 3, 3, 3], &mut g);
        let b = random(&[4], &mut g);
        let y = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
        let r = random(y.dims(), &mut g);
        let grads = conv2d_backward(&x, &k, stride, pad, &r).unwrap();
        total.merge(check_projection(
            &x,
            &r,
            |x| conv2d(x, &k, Some(&b), stride, pad).unwrap(),
            &grads.input,
            &mut g,
        ));
        total.merge(check_projection(
            &k,
            &r,
            |k| conv2d(&x, k, Some(&b), stride, pad).unwrap(),
            &grads.kernels,
            &mut g,
        ));
        total.merge(check_projection(
            &b,
            &r,
            |b| conv2d(&x, &k, Some(b), stride, pad).unwrap(),
            &grads.bias,
            &mut g,
        ));
    }
    total
}

pub fn conv1d_rows_ops(seeds: u64) -> GradReport {
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut g = rng(seed);
        let x = random(&[3, 4, 11], &mut g);
        let k = random(&[2, 3, 5], &mut g);
        let b = random(&[2], &mut g);
        let y = conv1d_rows(&x, &k, Some(&b), 2).unwrap();
        let r = random(y.dims(), &mut g);
        let grads = conv1d_rows_backward(&x, &k, 2, &r).unwrap();
        total.merge(check_projection(
            &x,
            &r,
            |x| conv1d_rows(x, &k, Some(&b), 2).unwrap(),
            &grads.input,
            &mut g,
        ));
        total.merge(check_projection(
            &k,
            &r,
            |k| conv1d_rows(&x, k, Some(&b), 2).unwrap(),
            &grads.kernels,
            &mut g,
        ));
        total.merge(check_projection(
            &b,
            &r,
            |b| conv1d_rows(&x, &k, Some(b), 2).unwrap(),
            &grads.bias,
            &mut g,
        ));
    }
    total
}

pub fn pointwise_ops(seeds: u64) -> GradReport {
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut g = rng(seed);
        for kind in [Pointwise::Relu, Pointwise::Sigmoid, Pointwise::Log] {
            let mut x = random(&[2, 5, 6], &mut g);
            if kind == Pointwise::Log {
                x = x.map(|v| v.abs() + 0.2);
            }
            let y = pointwise(kind, &x).unwrap();
            let r = random(y.dims(), &mut g);
            let d = pointwise_backward(kind, &x, &y, &r).unwrap();
            total.merge(check_projection(&x, &r, |x| pointwise(kind, x).unwrap(), &d, &mut g));
        }
    }
    total
}

pub fn softmax(seeds: u64) -> GradReport {
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut g = rng(seed);
        let x = random(&[5, 4, 6], &mut g).map(|v| 3.0 * v);
        let y = softmax_channels(&x).unwrap();
        let r = random(y.dims(), &mut g);
        let d = softmax_channels_backward(&y, &r).unwrap();
        total.merge(check_projection(&x, &r, |x| softmax_channels(x).unwrap(), &d, &mut g));
    }
    total
}

pub fn resample_pool_linear(seeds: u64) -> GradReport {
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut g = rng(seed);
        for kind in [Resample::AvgPool2, Resample::NearestUp2] {
            let x = random(&[3, 4, 6], &mut g);
            let y = resample(kind, &x).unwrap();
            let r = random(y.dims(), &mut g);
            let d = resample_backward(kind, &r).unwrap();
            total.merge(check_projection(&x, &r, |x| resample(kind, x).unwrap(), &d, &mut g));
        }

        let x = random(&[4, 3, 5], &mut g);
        let r = random(&[4], &mut g);
        let d = global_avg_pool_backward(x.dims(), &r).unwrap();
        total.merge(check_projection(&x, &r, |x| global_avg_pool(x).unwrap(), &d, &mut g));

        // random normals have no ties, so the max location is stable under the step
        let (_, at) = global_max_pool(&x).unwrap();
        let d = global_max_pool_backward(x.dims(), &at, &r).unwrap();
        total.merge(check_projection(&x, &r, |x| global_max_pool(x).unwrap().0, &d, &mut g));

        let x = random(&[6], &mut g);
        let w = random(&[3, 6], &mut g);
        let b = random(&[3], &mut g);
        let r = random(&[3], &mut g);
        let lg = linear_backward(&x, &w, &r).unwrap();
        total.merge(check_projection(&x, &r, |x| linear(x, &w, &b).unwrap(), &lg.input, &mut g));
        total.merge(check_projection(&w, &r, |w| linear(&x, w, &b).unwrap(), &lg.weight, &mut g));
        total.merge(check_projection(&b, &r, |b| linear(&x, &w, b).unwrap(), &lg.bias, &mut g));

        let a = random(&[2, 3, 4], &mut g);
        let c = random(&[3, 3, 4], &mut g);
        let r = random(&[5, 3, 4], &mut g);
        let (da, _) = split_channels(&r, 2).unwrap();
        total.merge(check_projection(&a, &r, |a| concat_channels(a, &c).unwrap(), &da, &mut g));
    }
    total
}

pub fn hough_pair(seeds: u64) -> GradReport {
    let table = VoteTable::new(HoughConfig::new(6, 10, 11, 12).unwrap());
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut g = rng(seed);
        let x = random(&[2, 6, 10], &mut g);
        let r = random(&[2, 12, 11], &mut g);
        let d = table.ht_backward(&r).unwrap();
        total.merge(check_projection(&x, &r, |x| table.ht_forward(x).unwrap(), &d, &mut g));

        let h = random(&[2, 12, 11], &mut g);
        let r = random(&[2, 6, 10], &mut g);
        let d = table.iht_backward(&r).unwrap();
        total.merge(check_projection(&h, &r, |h| table.iht_forward(h).unwrap(), &d, &mut g));
    }
    total
}

pub fn block_fixture(seed: u64) -> (HtIhtParams<f64>, VoteTable, Tensor<f64>) {
    let mut g = rng(1000 + seed);
    let mut params = HtIhtParams::<f64>::init(8, 4, 3, &mut g);
    for b in [&mut params.rho1_b, &mut params.rho2_b, &mut params.merge_b] {
        *b = random(b.dims(), &mut g).map(|v| 0.1 * v);
    }
    let table = VoteTable::new(HoughConfig::new(6, 10, 11, 12).unwrap());
    let f = random(&[8, 6, 10], &mut g);
    (params, table, f)
}

pub fn block(seeds: u64) -> GradReport {
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let (params, table, f) = block_fixture(seed);
        let mut g = rng(2000 + seed);
        let (out, cache) = block_forward(&params, &table, &f).unwrap();
        let r = random(out.dims(), &mut g);
        let (d_in, grads) = block_backward(&params, &table, &cache, &r).unwrap();

        total.merge(check_projection(
            &f,
            &r,
            |f| block_forward(&params, &table, f).unwrap().0,
            &d_in,
            &mut g,
        ));
        for ((name, p), (_, gp)) in params.tensors().into_iter().zip(grads.tensors()) {
            let report = check_projection(
                p,
                &r,
                |v| {
                    let mut q = params.clone();
                    for (n, t) in q.tensors_mut() {
                        if n == name {
                            *t = v.clone();
                        }
                    }
                    block_forward(&q, &table, &f).unwrap().0
                },
                gp,
                &mut g,
            );
            total.merge(report);
        }
    }
    total
}

fn small_table() -> VoteTable {
    VoteTable::new(HoughConfig::new(4, 6, 7, 6).unwrap())
}

fn random_mask(h: usize, w: usize, rng: &mut impl Rng) -> IntMask {
    IntMask::new(h, w, (0..h * w).map(|_| rng.random_range(0..5)).collect()).unwrap()
}

pub fn seg_and_lane_losses(seeds: u64) -> GradReport {
    let cfg = LossConfig::default();
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut g = rng(4000 + seed);
        let logits = random(&[5, 4, 6], &mut g).map(|v| 2.0 * v);
        let mask = random_mask(4, 6, &mut g);
        let probs = softmax_channels(&logits).unwrap();
        let (_, d) = seg_loss(&probs, &mask, &cfg).unwrap();
        let dims = logits.dims().to_vec();
        let f = |v: &[f64]| {
            let p = softmax_channels(&Tensor::new(&dims, v.to_vec()).unwrap()).unwrap();
            seg_loss(&p, &mask, &cfg).unwrap().0
        };
        let idx = pick(logits.len(), PER_SEED, &mut g);
        total.merge(GradCheck::default().run(f, logits.data(), d.data(), &idx));

        let p = Tensor::from_fn(&[4], |_| g.random_range(0.05..0.95));
        let t: Vec<bool> = (0..4).map(|_| g.random_bool(0.5)).collect();
        let (_, d) = lane_loss(&p, &t, &cfg).unwrap();
        let f = |v: &[f64]| lane_loss(&Tensor::new(&[4], v.to_vec()).unwrap(), &t, &cfg).unwrap().0;
        total.merge(GradCheck::default().run(f, p.data(), d.data(), &[0, 1, 2, 3]));
    }
    total
}

pub fn hough_loss(seeds: u64) -> GradReport {
    let cfg = LossConfig::default();
    let table = small_table();
    let mut total = GradReport::default();
    let mut applied = 0;
    for seed in 0..seeds {
        let mut g = rng(5000 + seed);
        let logits = random(&[5, 16, 24], &mut g).map(|v| 2.0 * v);
        let exist = Tensor::from_fn(&[4], |i| if i == 1 { 0.5 } else { 0.95 });
        let probs = softmax_channels(&logits).unwrap();
        let r = ht_loss(&probs, &exist, &table, &cfg).unwrap();
        applied += r.applied();
        let f = |v: &[f64]| {
            let p = softmax_channels(&Tensor::new(&[5, 16, 24], v.to_vec()).unwrap()).unwrap();
            ht_loss(&p, &exist, &table, &cfg).unwrap().loss
        };
        let idx = pick(logits.len(), PER_SEED, &mut g);
        total.merge(GradCheck::default().run(f, logits.data(), r.grad_logits.data(), &idx));
    }
    assert_eq!(applied, 3 * seeds as usize, "gated lanes must be skipped and the rest applied");
    total
}

fn set_flat(params: &ModelParams<f64>, flat: &[f64]) -> ModelParams<f64> {
    let mut q = params.clone();
    q.assign_flat(flat).unwrap();
    q
}

pub fn model(seeds: u64) -> GradReport {
    let table = small_table();
    let cfg = LossConfig {
        beta: 0.0,
        ..LossConfig::default()
    };
    let [_, ih, iw] = image_dims(&table);
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let mut params = init_params::<f64>(seed);
        let mut g = rng(6000 + seed);
        let mut flat = params.flatten();
        // non-zero biases so every bias gradient is exercised
        let named_len: Vec<(String, usize)> =
            params.named().iter().map(|(n, t)| (n.clone(), t.len())).collect();
        let mut off = 0;
        for (name, len) in &named_len {
            if name.ends_with(".b") {
                for v in &mut flat[off..off + len] {
                    *v = g.random_range(-0.05..0.05);
                }
            }
            off += len;
        }
        params.assign_flat(&flat).unwrap();

        let image = Tensor::from_fn(&[1, ih, iw], |_| g.random_range(0.0..1.0));
        let mask = random_mask(ih, iw, &mut g);
        let exist: Vec<bool> = (0..4).map(|_| g.random_bool(0.5)).collect();
        let objective = |p: &ModelParams<f64>| {
            let (out, cache) = forward(p, &image, &table).unwrap();
            let sup = Supervision::Labeled {
                mask: &mask,
                exist: &exist,
            };
            (total_loss(&out, sup, &table, &cfg, true).unwrap(), cache)
        };
        let (loss, cache) = objective(&params);
        let (grads, _) = backward(&params, &table, &cache, &loss.grad_logits, &loss.grad_exist).unwrap();
        let f = |v: &[f64]| objective(&set_flat(&params, v)).0.bundle.l_total;
        let idx = pick(flat.len(), PER_SEED, &mut g);
        total.merge(GradCheck::default().run(f, &flat, &grads.flatten(), &idx));

        // every tensor gets at least one coordinate checked
        let gflat = grads.flatten();
        let mut off = 0;
        let mut idx = Vec::new();
        for (_, len) in &named_len {
            idx.push(off + g.random_range(0..*len));
            off += len;
        }
        total.merge(GradCheck::default().run(f, &flat, &gflat, &idx));
    }
    total
}

pub fn model_image(seeds: u64) -> GradReport {
    let table = small_table();
    let cfg = LossConfig::default();
    let [_, ih, iw] = image_dims(&table);
    let mut total = GradReport::default();
    for seed in 0..seeds {
        let params = init_params::<f64>(seed);
        let mut g = rng(7000 + seed);
        let image = Tensor::from_fn(&[1, ih, iw], |_| g.random_range(0.0..1.0));
        let mask = random_mask(ih, iw, &mut g);
        let exist = [true, false, true, false];
        let loss_of = |img: &Tensor<f64>| {
            let (out, cache) = forward(&params, img, &table).unwrap();
            let sup = Supervision::Labeled {
                mask: &mask,
                exist: &exist,
            };
            (total_loss(&out, sup, &table, &cfg, false).unwrap(), cache)
        };
        let (loss, cache) = loss_of(&image);
        let (_, d_img) = backward(&params, &table, &cache, &loss.grad_logits, &loss.grad_exist).unwrap();
        let f = |v: &[f64]| loss_of(&Tensor::new(&[1, ih, iw], v.to_vec()).unwrap()).0.bundle.l_total;
        let idx = pick(image.len(), PER_SEED, &mut g);
        total.merge(GradCheck::default().run(f, image.data(), d_img.data(), &idx));
    }
    total
}

/// Smallest gap between the best and second-best Hough bin over the lanes
/// the Hough loss applies to.
fn argmax_margin(probs: &Tensor<f64>, exist: &Tensor<f64>, table: &VoteTable, tau: f64) -> f64 {
    let (h, w) = (probs.dims()[1], probs.dims()[2]);
    let mut margin = f64::INFINITY;
    for lane in 1..probs.dims()[0] {
        if exist.data()[lane - 1] <= tau {
            continue;
        }
        let m = Tensor::new(&[h, w], probs.outer(lane).to_vec()).unwrap();
        let m = resample(Resample::AvgPool2, &resample(Resample::AvgPool2, &m).unwrap()).unwrap();
        let mut v = table.ht_forward(&m).unwrap().into_data();
        v.sort_by(|a, b| b.total_cmp(a));
        margin = margin.min(v[0] - v[1]);
    }
    margin
}

pub fn model_with_hough_loss(seeds: u64) -> GradReport {
    let table = small_table();
    let cfg = LossConfig {
        beta: 1.0,
        tau: 0.05,
        ..LossConfig::default()
    };
    let [_, ih, iw] = image_dims(&table);
    let step = GradCheck::default().step;
    let mut total = GradReport::default();
    let mut stable = 0;
    let mut seed = 0;
    while stable < seeds {
        seed += 1;
        if seed > 20 * seeds {
            break;
        }
        let params = init_params::<f64>(100 + seed);
        let mut g = rng(8000 + seed);
        let image = Tensor::from_fn(&[1, ih, iw], |_| g.random_range(0.0..1.0));
        let loss_of = |p: &ModelParams<f64>| {
            let (out, cache) = forward(p, &image, &table).unwrap();
            let sup = Supervision::Unlabeled { pseudo: None };
            (total_loss(&out, sup, &table, &cfg, true).unwrap(), out, cache)
        };
        let (loss, out, cache) = loss_of(&params);
        if argmax_margin(&out.seg_probs, &out.exist_p, &table, cfg.tau) <= 10.0 * step {
            continue;
        }
        if loss.bundle.l_ht == 0.0 {
            continue;
        }
        stable += 1;
        let (grads, _) = backward(&params, &table, &cache, &loss.grad_logits, &loss.grad_exist).unwrap();
        let flat = params.flatten();
        let f = |v: &[f64]| loss_of(&set_flat(&params, v)).0.bundle.l_total;
        let idx = pick(flat.len(), 10, &mut g);
        total.merge(GradCheck::default().run(f, &flat, &grads.flatten(), &idx));
    }
    total
}

/// Every suite, in a fixed order, with a short name for reports.
pub fn all(seeds: u64) -> Vec<(&'static str, GradReport)> {
    let suites: [(&'static str, fn(u64) -> GradReport); 12] = [
        ("conv2d", conv2d_ops),
        ("conv1d_rows", conv1d_rows_ops),
        ("pointwise", pointwise_ops),
        ("softmax", softmax),
        ("resample/pool/linear/concat", resample_pool_linear),
        ("hough pair", hough_pair),
        ("ht-iht block", block),
        ("seg/lane loss", seg_and_lane_losses),
        ("hough loss", hough_loss),
        ("model", model),
        ("model image", model_image),
        ("model with hough loss", model_with_hough_loss),
    ];
    suites.into_iter().map(|(name, f)| (name, f(seeds))).collect()
}
