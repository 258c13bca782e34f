//! Discrete Hough and inverse Hough transforms over a precomputed vote table.
//!
//! Every pixel votes into exactly one offset bin per angle, so the transform is
//! a 0/1 sparse matrix. The inverse transform averages the bins a pixel voted
//! into, which makes it the transpose of the forward transform scaled by
//! `1/n_theta`. The same pair serves as forward pass and gradient.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial and Hough-space discretization.
///
/// The origin sits at the image center and angles cover `[0, π)`, so offsets
/// are symmetric around a center bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoughConfig {
    pub height: usize,
    pub width: usize,
    pub n_rho: usize,
    pub n_theta: usize,
    rho_max: f64,
    delta_rho: f64,
}

impl HoughConfig {
    pub fn new(height: usize, width: usize, n_rho: usize, n_theta: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config("Hough map needs non-empty spatial dims".into()));
        }
        if n_rho % 2 == 0 || n_rho < 3 {
            return Err(Error::Config(format!(
                "n_rho must be odd and at least 3, got {n_rho}"
            )));
        }
        if n_theta < 2 {
            return Err(Error::Config(format!("n_theta must be at least 2, got {n_theta}")));
        }
        if n_rho > u16::MAX as usize {
            return Err(Error::Config(format!("n_rho {n_rho} too large")));
        }
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let rho_max = (cx * cx + cy * cy).sqrt();
        // A single-pixel map has rho_max 0; keep the bin width positive.
        let delta_rho = if rho_max > 0.0 {
            2.0 * rho_max / (n_rho as f64 - 1.0)
        } else {
            1.0
        };
        Ok(HoughConfig {
            height,
            width,
            n_rho,
            n_theta,
            rho_max,
            delta_rho,
        })
    }

    /// 16×40 features, 43 offsets, 30 angles.
    pub fn desk() -> Self {
        Self::new(16, 40, 43, 30).expect("valid preset")
    }

    /// 26×122 features, 125 offsets, 60 angles.
    pub fn paper() -> Self {
        Self::new(26, 122, 125, 60).expect("valid preset")
    }

    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }

    pub fn delta_rho(&self) -> f64 {
        self.delta_rho
    }

    pub fn theta(&self, j: usize) -> f64 {
        j as f64 * PI / self.n_theta as f64
    }

    /// Offset value at the center of bin `k`.
    pub fn rho_of_bin(&self, k: usize) -> f64 {
        k as f64 * self.delta_rho - self.rho_max
    }

    /// Center-origin coordinates of pixel (row, col).
    pub fn centered(&self, row: usize, col: usize) -> (f64, f64) {
        (
            col as f64 - (self.width as f64 - 1.0) / 2.0,
            row as f64 - (self.height as f64 - 1.0) / 2.0,
        )
    }

    /// Nearest offset bin, rounding half away from zero, clamped to range.
    pub fn bin_of_rho(&self, rho: f64) -> usize {
        let b = ((rho + self.rho_max) / self.delta_rho).round();
        b.clamp(0.0, (self.n_rho - 1) as f64) as usize
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HoughPreset {
    #[default]
    Desk,
    Paper,
}

impl HoughPreset {
    pub fn config(self) -> HoughConfig {
        match self {
            HoughPreset::Desk => HoughConfig::desk(),
            HoughPreset::Paper => HoughConfig::paper(),
        }
    }
}

impl fmt::Display for HoughPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HoughPreset::Desk => "desk",
            HoughPreset::Paper => "paper",
        })
    }
}

impl FromStr for HoughPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(HoughPreset::Desk),
            "paper" => Ok(HoughPreset::Paper),
            other => Err(Error::Config(format!(
                "unknown Hough preset {other:?} (expected desk or paper)"
            ))),
        }
    }
}

/// Position of one Hough bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BinIndex {
    pub theta_idx: usize,
    pub rho_idx: usize,
}

/// Offset bin each pixel votes into at each angle, laid out `[n_theta, H·W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteTable {
    config: HoughConfig,
    bins: Vec<u16>,
}

impl VoteTable {
    pub fn new(config: HoughConfig) -> Self {
        let hw = config.pixels();
        let mut bins = Vec::with_capacity(config.n_theta * hw);
        for j in 0..config.n_theta {
            let (sin, cos) = config.theta(j).sin_cos();
            for row in 0..config.height {
                for col in 0..config.width {
                    let (xc, yc) = config.centered(row, col);
                    bins.push(config.bin_of_rho(xc * cos + yc * sin) as u16);
                }
            }
        }
        VoteTable { config, bins }
    }

    #[inline]
    pub fn config(&self) -> &HoughConfig {
        &self.config
    }

    /// Offset bin of pixel `(row, col)` at angle `j`.
    #[inline]
    pub fn bin(&self, j: usize, row: usize, col: usize) -> usize {
        self.bins[j * self.config.pixels() + row * self.config.width + col] as usize
    }

    #[inline]
    fn angle_row(&self, j: usize) -> &[u16] {
        let hw = self.config.pixels();
        &self.bins[j * hw..(j + 1) * hw]
    }

    /// Leading (channel) count of a feature map `[H,W]` or `[C,H,W]`.
    fn feature_channels<T: Scalar>(&self, op: &'static str, f: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        match f.dims() {
            [h, w] if *h == c.height && *w == c.width => Ok(1),
            [ch, h, w] if *h == c.height && *w == c.width => Ok(*ch),
            d => Err(Error::shape(
                op,
                format!("feature map {d:?} does not match {}x{} table", c.height, c.width),
            )),
        }
    }

    fn hough_channels<T: Scalar>(&self, op: &'static str, h: &Tensor<T>) -> Result<usize> {
        let c = &self.config;
        match h.dims() {
            [t, r] if *t == c.n_theta && *r == c.n_rho => Ok(1),
            [ch, t, r] if *t == c.n_theta && *r == c.n_rho => Ok(*ch),
            d => Err(Error::shape(
                op,
                format!(
                    "Hough map {d:?} does not match {}x{} (n_theta x n_rho)",
                    c.n_theta, c.n_rho
                ),
            )),
        }
    }

    fn hough_dims(&self, like: &[usize]) -> Vec<usize> {
        let (t, r) = (self.config.n_theta, self.config.n_rho);
        if like.len() == 3 {
            vec![like[0], t, r]
        } else {
            vec![t, r]
        }
    }

    fn feature_dims(&self, like: &[usize]) -> Vec<usize> {
        let (h, w) = (self.config.height, self.config.width);
        if like.len() == 3 {
            vec![like[0], h, w]
        } else {
            vec![h, w]
        }
    }

    fn scatter<T: Scalar>(&self, channels: usize, src: &[T], dst: &mut [T]) {
        let hw = self.config.pixels();
        let per_map = self.config.n_theta * self.config.n_rho;
        for ch in 0..channels {
            let f = &src[ch * hw..(ch + 1) * hw];
            let out = &mut dst[ch * per_map..(ch + 1) * per_map];
            for j in 0..self.config.n_theta {
                let row = &mut out[j * self.config.n_rho..(j + 1) * self.config.n_rho];
                for (&b, &v) in self.angle_row(j).iter().zip(f) {
                    row[b as usize] += v;
                }
            }
        }
    }

    fn gather<T: Scalar>(&self, channels: usize, src: &[T], dst: &mut [T]) {
        let hw = self.config.pixels();
        let per_map = self.config.n_theta * self.config.n_rho;
        for ch in 0..channels {
            let h = &src[ch * per_map..(ch + 1) * per_map];
            let out = &mut dst[ch * hw..(ch + 1) * hw];
            for j in 0..self.config.n_theta {
                let row = &h[j * self.config.n_rho..(j + 1) * self.config.n_rho];
                for (o, &b) in out.iter_mut().zip(self.angle_row(j)) {
                    *o += row[b as usize];
                }
            }
        }
    }

    /// Hough transform: every pixel adds its value to its bin at each angle.
    /// Accepts `[H,W]` or `[C,H,W]` and returns `[n_theta,n_rho]` or
    /// `[C,n_theta,n_rho]`.
    pub fn ht_forward<T: Scalar>(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let channels = self.feature_channels("ht_forward", f)?;
        let mut out = Tensor::zeros(&self.hough_dims(f.dims()));
        self.scatter(channels, f.data(), out.data_mut());
        Ok(out)
    }

    /// Inverse Hough transform: every pixel averages the bins it voted into.
    pub fn iht_forward<T: Scalar>(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let channels = self.hough_channels("iht_forward", h)?;
        let mut out = Tensor::zeros(&self.feature_dims(h.dims()));
        self.gather(channels, h.data(), out.data_mut());
        let n = T::of(self.config.n_theta as f64);
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }

    /// Gradient of [`Self::ht_forward`]: the transpose, i.e. an un-averaged gather.
    pub fn ht_backward<T: Scalar>(&self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let channels = self.hough_channels("ht_backward", upstream)?;
        let mut out = Tensor::zeros(&self.feature_dims(upstream.dims()));
        self.gather(channels, upstream.data(), out.data_mut());
        Ok(out)
    }

    /// Gradient of [`Self::iht_forward`]: scatter scaled by `1/n_theta`.
    pub fn iht_backward<T: Scalar>(&self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let channels = self.feature_channels("iht_backward", upstream)?;
        let mut out = Tensor::zeros(&self.hough_dims(upstream.dims()));
        self.scatter(channels, upstream.data(), out.data_mut());
        let n = T::of(self.config.n_theta as f64);
        out.data_mut().iter_mut().for_each(|v| *v /= n);
        Ok(out)
    }
}

/// Location of the largest value of a `[n_theta, n_rho]` map; ties go to the
/// smallest row-major index.
pub fn global_argmax<T: Scalar>(h: &Tensor<T>) -> Result<BinIndex> {
    h.expect_rank("global_argmax", "Hough map", 2)?;
    let n_rho = h.dims()[1];
    Ok(argmax_in(h.data(), n_rho))
}

pub(crate) fn argmax_in<T: Scalar>(data: &[T], n_rho: usize) -> BinIndex {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate().skip(1) {
        if v > data[best] {
            best = i;
        }
    }
    BinIndex {
        theta_idx: best / n_rho,
        rho_idx: best % n_rho,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> VoteTable {
        VoteTable::new(HoughConfig::new(5, 5, 7, 4).unwrap())
    }

    #[test]
    fn config_validation_and_geometry() {
        assert!(HoughConfig::new(5, 5, 6, 4).is_err());
        assert!(HoughConfig::new(5, 5, 7, 1).is_err());
        assert!(HoughConfig::new(0, 5, 7, 4).is_err());
        let c = HoughConfig::desk();
        let want = (19.5f64.powi(2) + 7.5f64.powi(2)).sqrt();
        assert!((c.rho_max() - want).abs() < 1e-12);
        assert!((c.delta_rho() - 2.0 * want / 42.0).abs() < 1e-12);
        let p = HoughConfig::paper();
        assert_eq!((p.height, p.width, p.n_rho, p.n_theta), (26, 122, 125, 60));
    }

    #[test]
    fn center_pixel_votes_center_bin() {
        let t = small();
        for j in 0..4 {
            assert_eq!(t.bin(j, 2, 2), 3);
        }
    }

    #[test]
    fn hand_evaluated_vote() {
        // x_c = 2, θ = 0 → ρ = 2 → round((2 + 2√2) / (2√2 / 3)) = 5
        assert_eq!(small().bin(0, 2, 4), 5);
    }

    #[test]
    fn bins_stay_in_range() {
        for cfg in [HoughConfig::desk(), HoughConfig::paper(), HoughConfig::new(3, 9, 3, 7).unwrap()] {
            let t = VoteTable::new(cfg);
            assert!(t.bins.iter().all(|&b| (b as usize) < cfg.n_rho));
        }
    }

    #[test]
    fn zero_maps_transform_to_zero() {
        let t = small();
        let h = t.ht_forward(&Tensor::<f32>::zeros(&[5, 5])).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        let f = t.iht_forward(&Tensor::<f32>::zeros(&[4, 7])).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_center_lights_center_column() {
        let t = small();
        let mut f = Tensor::<f32>::zeros(&[5, 5]);
        f.data_mut()[12] = 1.0;
        let h = t.ht_forward(&f).unwrap();
        for j in 0..4 {
            for k in 0..7 {
                let want = if k == 3 { 1.0 } else { 0.0 };
                assert_eq!(h.data()[j * 7 + k], want);
            }
        }
    }

    #[test]
    fn center_row_concentrates_at_vertical_normal() {
        let t = small();
        let f = Tensor::<f32>::from_fn(&[5, 5], |i| if i / 5 == 2 { 1.0 } else { 0.0 });
        let h = t.ht_forward(&f).unwrap();
        // θ index 2 is π/2
        assert_eq!(h.data()[2 * 7 + 3], 5.0);
        assert_eq!(global_argmax(&h).unwrap(), BinIndex { theta_idx: 2, rho_idx: 3 });
    }

    #[test]
    fn iht_of_ones_is_ones() {
        let t = small();
        let f = t.iht_forward(&Tensor::<f32>::full(&[4, 7], 1.0)).unwrap();
        assert!(f.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ht_backward_of_ones_counts_angles() {
        let t = small();
        let g = t.ht_backward(&Tensor::<f32>::full(&[4, 7], 1.0)).unwrap();
        assert!(g.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn ht_backward_one_hot_is_vote_indicator() {
        let t = VoteTable::new(HoughConfig::desk());
        let (j, k) = (7, 20);
        let mut up = Tensor::<f32>::zeros(&[30, 43]);
        up.data_mut()[j * 43 + k] = 1.0;
        let g = t.ht_backward(&up).unwrap();
        for row in 0..16 {
            for col in 0..40 {
                let want = if t.bin(j, row, col) == k { 1.0 } else { 0.0 };
                assert_eq!(g.data()[row * 40 + col], want);
            }
        }
    }

    #[test]
    fn batched_matches_per_channel() {
        let t = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::<f32>::from_fn(&[3, 5, 5], |_| rng.random_range(0.0..1.0));
        let h = t.ht_forward(&f).unwrap();
        assert_eq!(h.dims(), &[3, 4, 7]);
        for c in 0..3 {
            let fc = Tensor::new(&[5, 5], f.outer(c).to_vec()).unwrap();
            assert_eq!(t.ht_forward(&fc).unwrap().data(), h.outer(c));
        }
        let back = t.iht_forward(&h).unwrap();
        assert_eq!(back.dims(), &[3, 5, 5]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let t = small();
        assert!(t.ht_forward(&Tensor::<f32>::zeros(&[5, 6])).is_err());
        assert!(t.iht_forward(&Tensor::<f32>::zeros(&[7, 4])).is_err());
    }

    #[test]
    fn argmax_ties_pick_first() {
        let h = Tensor::<f32>::full(&[3, 5], 2.0);
        assert_eq!(global_argmax(&h).unwrap(), BinIndex { theta_idx: 0, rho_idx: 0 });
        let mut h = Tensor::<f32>::zeros(&[3, 5]);
        h.data_mut()[11] = 1.0;
        assert_eq!(global_argmax(&h).unwrap(), BinIndex { theta_idx: 2, rho_idx: 1 });
    }

    #[test]
    fn preset_parsing() {
        assert_eq!("desk".parse::<HoughPreset>().unwrap(), HoughPreset::Desk);
        assert_eq!("paper".parse::<HoughPreset>().unwrap().config(), HoughConfig::paper());
        assert!("huge".parse::<HoughPreset>().is_err());
    }
}
