//! Procedural lane scenes: a dark road with up to four bright, slightly bowed
//! lane strokes converging toward a vanishing point above the image.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mask::IntMask;
use crate::model::MAX_LANES;
use crate::pnm::{dequantize, quantize};
use crate::tensor::Tensor;

const ROAD_LEVEL: f32 = 0.2;
const LANE_LEVEL: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub lanes_min: usize,
    pub lanes_max: usize,
    pub lane_width_min: usize,
    pub lane_width_max: usize,
    pub noise_min: f32,
    pub noise_max: f32,
    pub brightness_min: f32,
    pub brightness_max: f32,
    pub occlusion_prob: f64,
    /// Largest sideways bow of a lane, in pixels. Zero gives straight lanes.
    pub max_sagitta: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 160,
            height: 64,
            lanes_min: 1,
            lanes_max: 4,
            lane_width_min: 2,
            lane_width_max: 4,
            noise_min: 0.0,
            noise_max: 0.15,
            brightness_min: 0.4,
            brightness_max: 1.0,
            occlusion_prob: 0.3,
            max_sagitta: 3.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.width < 32 || self.height < 32 {
            return fail("images must be at least 32x32");
        }
        if self.lanes_min == 0 || self.lanes_min > self.lanes_max || self.lanes_max > MAX_LANES {
            return fail("need 1 <= lanes_min <= lanes_max <= 4");
        }
        if self.lane_width_min == 0 || self.lane_width_min > self.lane_width_max || self.lane_width_max > 8 {
            return fail("need 1 <= lane_width_min <= lane_width_max <= 8");
        }
        if !(0.0 <= self.noise_min && self.noise_min <= self.noise_max && self.noise_max <= 1.0) {
            return fail("need 0 <= noise_min <= noise_max <= 1");
        }
        if !(0.0 < self.brightness_min && self.brightness_min <= self.brightness_max && self.brightness_max <= 1.0) {
            return fail("need 0 < brightness_min <= brightness_max <= 1");
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return fail("occlusion_prob must lie in [0,1]");
        }
        if !(0.0..=8.0).contains(&self.max_sagitta) {
            return fail("max_sagitta must lie in [0,8]");
        }
        Ok(())
    }
}

/// One rendered scene with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[1, H, W]`, values on the 1/255 grid in `[0,1]`.
    pub image: Tensor<f32>,
    pub mask: IntMask,
    pub exist: Vec<bool>,
    pub labeled: bool,
}

/// Center line of one lane stroke.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaneGeometry {
    pub label: u8,
    pub bottom_x: f32,
    pub vanish_x: f32,
    pub vanish_y: f32,
    pub top_row: usize,
    pub width: usize,
    pub sagitta: f32,
}

impl LaneGeometry {
    /// Column of the lane axis at `row`.
    pub fn axis_at(&self, row: f32, height: usize) -> f32 {
        let bottom = (height - 1) as f32;
        let t = (row - self.vanish_y) / (bottom - self.vanish_y);
        let straight = self.vanish_x + (self.bottom_x - self.vanish_x) * t;
        let s = (row - self.top_row as f32) / (bottom - self.top_row as f32);
        straight + 4.0 * self.sagitta * s * (1.0 - s)
    }
}

/// Seed of sample `id` in a dataset generated from `seed`.
pub fn sample_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn gen_sample(seed: u64, cfg: &SceneConfig) -> Sample {
    gen_scene(seed, cfg).0
}

/// Renders a scene and also returns the geometry of every drawn lane.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> (Sample, Vec<LaneGeometry>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as f32, cfg.height);
    let count = rng.random_range(cfg.lanes_min..=cfg.lanes_max);
    let mut slots = index::sample(&mut rng, MAX_LANES, count).into_vec();
    slots.sort_unstable();

    let vanish_x = w / 2.0 + rng.random_range(-0.05..=0.05) * w;
    let vanish_y = -0.15 * h as f32;
    let top_lo = (0.22 * h as f32) as usize;
    let top_hi = (0.34 * h as f32) as usize;

    let lanes: Vec<LaneGeometry> = slots
        .iter()
        .map(|&slot| {
            let bottom_x = w * (0.125 + 0.25 * slot as f32) + rng.random_range(-0.025..=0.025) * w;
            LaneGeometry {
                label: slot as u8 + 1,
                bottom_x,
                vanish_x,
                vanish_y,
                top_row: rng.random_range(top_lo..=top_hi),
                width: rng.random_range(cfg.lane_width_min..=cfg.lane_width_max),
                sagitta: if cfg.max_sagitta > 0.0 {
                    rng.random_range(-cfg.max_sagitta..=cfg.max_sagitta)
                } else {
                    0.0
                },
            }
        })
        .collect();

    let mut mask = IntMask::zeros(h, cfg.width);
    for lane in &lanes {
        for row in lane.top_row..h {
            let x = lane.axis_at(row as f32, h);
            let start = (x - lane.width as f32 / 2.0 + 0.5).floor() as i64;
            for col in start..start + lane.width as i64 {
                if (0..cfg.width as i64).contains(&col) {
                    mask.set(row, col as usize, lane.label);
                }
            }
        }
    }

    let brightness = rng.random_range(cfg.brightness_min..=cfg.brightness_max);
    let sigma = rng.random_range(cfg.noise_min..=cfg.noise_max);
    let noise = Normal::new(0.0f32, sigma).expect("validated noise level");
    let mut pixels: Vec<f32> = mask
        .data()
        .iter()
        .map(|&m| if m == 0 { ROAD_LEVEL } else { LANE_LEVEL } * brightness)
        .collect();
    if sigma > 0.0 {
        for v in &mut pixels {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    if rng.random_bool(cfg.occlusion_prob) {
        let ow = rng.random_range(cfg.width / 8..=cfg.width / 4);
        let oh = rng.random_range(h / 8..=h / 4);
        let x0 = rng.random_range(0..=cfg.width - ow);
        let y0 = rng.random_range(0..=h - oh);
        for row in y0..y0 + oh {
            pixels[row * cfg.width + x0..row * cfg.width + x0 + ow].fill(0.0);
        }
    }
    for v in &mut pixels {
        *v = dequantize(quantize(*v));
    }

    let exist = (1..=MAX_LANES as u8).map(|c| slots.contains(&(c as usize - 1))).collect();
    let sample = Sample {
        id: 0,
        image: Tensor::new(&[1, h, cfg.width], pixels).expect("scene dims are non-zero"),
        mask,
        exist,
        labeled: true,
    };
    (sample, lanes)
}

/// `n` samples with ids `0..n`, generated in parallel.
pub fn generate(n: usize, seed: u64, cfg: &SceneConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    Ok((0..n as u64)
        .into_par_iter()
        .map(|id| {
            let mut s = gen_sample(sample_seed(seed, id), cfg);
            s.id = id;
            s
        })
        .collect())
}

/// Shuffles `0..n` with `seed`; the first `round(n·fraction)` indices are
/// labeled. Both lists come back sorted.
pub fn split_dataset(n: usize, labeled_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must lie in (0,1], got {labeled_fraction}"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
    let cut = (n as f64 * labeled_fraction).round() as usize;
    let mut labeled = ids[..cut].to_vec();
    let mut unlabeled = ids[cut..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok((labeled, unlabeled))
}
