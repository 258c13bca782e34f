//! Segmentation cross-entropy, lane-existence BCE, the Hough max-bin loss,
//! and their weighted combination.
//!
//! Every loss returns its value (accumulated in `f64`) together with the exact
//! gradient with respect to the model output it consumes: segmentation logits
//! for the two pixel losses, existence probabilities for the BCE term.

use crate::error::{Error, Result};
use crate::hough::{argmax_in, BinIndex, VoteTable};
use crate::mask::IntMask;
use crate::model::{ModelOutput, DOWNSAMPLE, MAX_LANES};
use crate::tensor::{resample, resample_backward, softmax_channels_backward, Resample, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the existence loss.
    pub alpha: f64,
    /// Weight of the Hough max-bin loss.
    pub beta: f64,
    /// Existence probability a lane needs before the Hough loss applies to it.
    pub tau: f64,
    /// Cross-entropy weight of background pixels.
    pub bg_weight: f64,
    pub eps: f64,
    /// Existence probability a lane needs to become a pseudo-label.
    pub pseudo_threshold: f64,
    /// Also apply the Hough loss to labeled samples.
    pub ht_on_labeled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            beta: 0.01,
            tau: 0.9,
            bg_weight: 0.4,
            eps: 1e-8,
            pseudo_threshold: 0.9,
            ht_on_labeled: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if !unit(self.tau) || !unit(self.pseudo_threshold) {
            return Err(Error::Config("tau and pseudo_threshold must lie in (0,1)".into()));
        }
        if !(self.eps > 0.0) || !(self.bg_weight >= 0.0) {
            return Err(Error::Config("eps must be positive and bg_weight non-negative".into()));
        }
        Ok(())
    }
}

/// Weighted pixel cross-entropy averaged over pixels. The gradient is with
/// respect to the logits that produced `probs`.
pub fn seg_loss<T: Scalar>(
    probs: &Tensor<T>,
    target: &IntMask,
    cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    probs.expect_rank("seg_loss", "probabilities", 3)?;
    let (c, h, w) = (probs.dims()[0], probs.dims()[1], probs.dims()[2]);
    if target.height() != h || target.width() != w {
        return Err(Error::shape(
            "seg_loss",
            format!(
                "target {}x{} vs predictions {h}x{w}",
                target.height(),
                target.width()
            ),
        ));
    }
    if let Some(i) = target.data().iter().position(|&v| v as usize >= c) {
        return Err(Error::Data(format!(
            "target label {} out of range at pixel (row {}, col {})",
            target.data()[i],
            i / w,
            i % w
        )));
    }
    let n = (h * w) as f64;
    let eps = cfg.eps;
    let plane = h * w;
    let p = probs.data();
    let mut grad = vec![T::zero(); p.len()];
    let mut total = 0.0;
    for (i, &t) in target.data().iter().enumerate() {
        let t = t as usize;
        let weight = if t == 0 { cfg.bg_weight } else { 1.0 };
        let pt = p[t * plane + i].as_f64();
        total += weight * -(pt + eps).ln();
        // d/dz_c of −ln(p_t + ε) = p_t/(p_t + ε) · (p_c − δ_ct)
        let scale = T::of(weight * pt / (pt + eps) / n);
        for ch in 0..c {
            let idx = ch * plane + i;
            let delta = if ch == t { T::one() } else { T::zero() };
            grad[idx] = scale * (p[idx] - delta);
        }
    }
    Ok((total / n, Tensor::new(probs.dims(), grad)?))
}

/// Binary cross-entropy of the existence probabilities, averaged over lanes.
/// The gradient is with respect to the probabilities.
pub fn lane_loss<T: Scalar>(
    exist_p: &Tensor<T>,
    target: &[bool],
    cfg: &LossConfig,
) -> Result<(f64, Tensor<T>)> {
    if exist_p.dims() != [target.len()] {
        return Err(Error::shape(
            "lane_loss",
            format!("{} targets for predictions {:?}", target.len(), exist_p.dims()),
        ));
    }
    let k = target.len() as f64;
    let eps = cfg.eps;
    let mut total = 0.0;
    let grad = exist_p
        .data()
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = p.as_f64();
            if t {
                total -= (p + eps).ln();
                T::of(-1.0 / (p + eps) / k)
            } else {
                total -= (1.0 - p + eps).ln();
                T::of(1.0 / (1.0 - p + eps) / k)
            }
        })
        .collect();
    Ok((total / k, Tensor::new(exist_p.dims(), grad)?))
}

/// Max-bin term of one Hough map: `−ln((h[θ̂,ρ̂] + ε) / (Σ_k h[θ̂,k] + ε))`
/// at the global maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxBinTerm {
    pub bin: BinIndex,
    pub peak: f64,
    pub column_mass: f64,
    pub term: f64,
}

/// Evaluates the max-bin term of a `[n_theta, n_rho]` map. Returns `None` when
/// the column holding the maximum has less than `eps` mass.
pub fn max_bin_term<T: Scalar>(h: &[T], n_rho: usize, eps: f64) -> Option<MaxBinTerm> {
    let bin = argmax_in(h, n_rho);
    let column = &h[bin.theta_idx * n_rho..(bin.theta_idx + 1) * n_rho];
    let column_mass: f64 = column.iter().map(|v| v.as_f64()).sum();
    if column_mass < eps {
        return None;
    }
    let peak = column[bin.rho_idx].as_f64();
    Some(MaxBinTerm {
        bin,
        peak,
        column_mass,
        term: -((peak + eps) / (column_mass + eps)).ln(),
    })
}

/// What the Hough loss did with one lane channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LaneHt {
    /// Existence probability at or below τ.
    Gated { exist_p: f64 },
    /// Column mass below ε; no line evidence.
    Skipped { column_mass: f64 },
    Applied(MaxBinTerm),
}

#[derive(Clone, Debug)]
pub struct HtLoss<T> {
    pub loss: f64,
    /// Gradient with respect to the segmentation logits.
    pub grad_logits: Tensor<T>,
    pub lanes: Vec<LaneHt>,
}

impl<T> HtLoss<T> {
    pub fn applied(&self) -> usize {
        self.lanes
            .iter()
            .filter(|l| matches!(l, LaneHt::Applied(_)))
            .count()
    }
}

/// Average-pools a `[4H, 4W]` map down to the `H×W` grid of `table`.
pub fn pool_to_table<T: Scalar>(channel: Tensor<T>, table: &VoteTable) -> Result<Tensor<T>> {
    let mut m = channel;
    let mut factor = 1;
    while factor < DOWNSAMPLE {
        m = resample(Resample::AvgPool2, &m)?;
        factor *= 2;
    }
    let c = table.config();
    if m.dims() != [c.height, c.width] {
        return Err(Error::shape(
            "pool_to_table",
            format!(
                "pooled map {:?} does not match the {}x{} vote table",
                m.dims(),
                c.height,
                c.width
            ),
        ));
    }
    Ok(m)
}

/// Hough max-bin loss over the lane channels of `probs` (`[K+1, 4H, 4W]`).
///
/// A lane channel contributes only when its existence probability exceeds τ.
/// Its probabilities are average-pooled to the vote-table resolution and
/// Hough-transformed; the loss is the mean max-bin term over contributing
/// channels. The argmax location and the gate are constants for the gradient.
pub fn ht_loss<T: Scalar>(
    probs: &Tensor<T>,
    exist_p: &Tensor<T>,
    table: &VoteTable,
    cfg: &LossConfig,
) -> Result<HtLoss<T>> {
    probs.expect_rank("ht_loss", "probabilities", 3)?;
    let lanes = probs.dims()[0] - 1;
    if exist_p.dims() != [lanes] {
        return Err(Error::shape(
            "ht_loss",
            format!("{:?} existence values for {lanes} lanes", exist_p.dims()),
        ));
    }
    let (h, w) = (probs.dims()[1], probs.dims()[2]);
    let n_rho = table.config().n_rho;

    let mut reports = Vec::with_capacity(lanes);
    let mut applied = Vec::new();
    for lane in 1..=lanes {
        let p = exist_p.data()[lane - 1].as_f64();
        if !(p > cfg.tau) {
            reports.push(LaneHt::Gated { exist_p: p });
            continue;
        }
        let channel = Tensor::new(&[h, w], probs.outer(lane).to_vec())?;
        let pooled = pool_to_table(channel, table)?;
        let hough = table.ht_forward(&pooled)?;
        match max_bin_term(hough.data(), n_rho, cfg.eps) {
            Some(term) => {
                reports.push(LaneHt::Applied(term));
                applied.push((lane, term));
            }
            None => {
                let column_mass = hough.data()[..n_rho].iter().map(|v| v.as_f64()).sum();
                reports.push(LaneHt::Skipped { column_mass });
            }
        }
    }

    let mut grad_probs = Tensor::zeros(probs.dims());
    if applied.is_empty() {
        return Ok(HtLoss {
            loss: 0.0,
            grad_logits: grad_probs,
            lanes: reports,
        });
    }
    let count = applied.len() as f64;
    let loss = applied.iter().map(|(_, t)| t.term).sum::<f64>() / count;
    let cfgh = table.config();
    for (lane, term) in &applied {
        let mut g = Tensor::zeros(&[cfgh.n_theta, cfgh.n_rho]);
        let row = term.bin.theta_idx * n_rho;
        let shared = 1.0 / (term.column_mass + cfg.eps) / count;
        for k in 0..n_rho {
            g.data_mut()[row + k] = T::of(shared);
        }
        g.data_mut()[row + term.bin.rho_idx] =
            T::of(shared - 1.0 / (term.peak + cfg.eps) / count);
        let mut d = table.ht_backward(&g)?;
        let mut factor = 1;
        while factor < DOWNSAMPLE {
            d = resample_backward(Resample::AvgPool2, &d)?;
            factor *= 2;
        }
        grad_probs.outer_mut(*lane).copy_from_slice(d.data());
    }
    Ok(HtLoss {
        loss,
        grad_logits: softmax_channels_backward(probs, &grad_probs)?,
        lanes: reports,
    })
}

/// The three loss values and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_seg: f64,
    pub l_lane: f64,
    pub l_ht: f64,
    pub l_total: f64,
}

impl LossBundle {
    /// `l_total = l_seg + α·l_lane + β·l_ht`
    pub fn compose(l_seg: f64, l_lane: f64, l_ht: f64, cfg: &LossConfig) -> Self {
        LossBundle {
            l_seg,
            l_lane,
            l_ht,
            l_total: l_seg + cfg.alpha * l_lane + cfg.beta * l_ht,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_seg.is_finite()
            && self.l_lane.is_finite()
            && self.l_ht.is_finite()
            && self.l_total.is_finite()
    }
}

/// Hard targets derived from a confident prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabel {
    pub mask: IntMask,
    pub exist: Vec<bool>,
}

/// Targets available for one sample.
#[derive(Clone, Copy, Debug)]
pub enum Supervision<'a> {
    Labeled { mask: &'a IntMask, exist: &'a [bool] },
    Unlabeled { pseudo: Option<&'a PseudoLabel> },
}

#[derive(Clone, Debug)]
pub struct SampleLoss<T> {
    pub bundle: LossBundle,
    pub grad_logits: Tensor<T>,
    pub grad_exist: Tensor<T>,
    pub ht_lanes: Vec<LaneHt>,
}

/// Full objective of one sample.
///
/// Labeled samples optimize `l_seg + α·l_lane` (plus `β·l_ht` when
/// `use_ht && cfg.ht_on_labeled`). Unlabeled samples optimize `β·l_ht` when
/// `use_ht`, plus `l_seg` against their pseudo-label when one exists.
pub fn total_loss<T: Scalar>(
    out: &ModelOutput<T>,
    supervision: Supervision<'_>,
    table: &VoteTable,
    cfg: &LossConfig,
    use_ht: bool,
) -> Result<SampleLoss<T>> {
    let mut grad_logits = Tensor::zeros(out.seg_logits.dims());
    let mut grad_exist = Tensor::zeros(out.exist_p.dims());
    let (mut l_seg, mut l_lane, mut l_ht) = (0.0, 0.0, 0.0);
    let mut ht_lanes = Vec::new();

    let (seg_target, lane_target, ht_applies) = match supervision {
        Supervision::Labeled { mask, exist } => {
            (Some(mask), Some(exist), use_ht && cfg.ht_on_labeled)
        }
        Supervision::Unlabeled { pseudo } => (pseudo.map(|p| &p.mask), None, use_ht),
    };

    if let Some(mask) = seg_target {
        let (l, g) = seg_loss(&out.seg_probs, mask, cfg)?;
        l_seg = l;
        grad_logits.add_assign(&g)?;
    }
    if let Some(exist) = lane_target {
        let (l, g) = lane_loss(&out.exist_p, exist, cfg)?;
        l_lane = l;
        grad_exist.add_scaled(&g, T::of(cfg.alpha))?;
    }
    if ht_applies {
        let ht = ht_loss(&out.seg_probs, &out.exist_p, table, cfg)?;
        l_ht = ht.loss;
        grad_logits.add_scaled(&ht.grad_logits, T::of(cfg.beta))?;
        ht_lanes = ht.lanes;
    }
    Ok(SampleLoss {
        bundle: LossBundle::compose(l_seg, l_lane, l_ht, cfg),
        grad_logits,
        grad_exist,
        ht_lanes,
    })
}

/// Keeps lanes whose existence probability exceeds the pseudo-label
/// threshold; each pixel takes the most probable of background and the kept
/// lanes. `None` when no lane is confident.
pub fn make_pseudo_labels<T: Scalar>(out: &ModelOutput<T>, cfg: &LossConfig) -> Option<PseudoLabel> {
    let exist: Vec<bool> = out
        .exist_p
        .data()
        .iter()
        .map(|&p| p.as_f64() > cfg.pseudo_threshold)
        .collect();
    if !exist.iter().any(|&e| e) {
        return None;
    }
    let channels: Vec<usize> = std::iter::once(0)
        .chain(exist.iter().enumerate().filter(|(_, &e)| e).map(|(i, _)| i + 1))
        .collect();
    let mask = IntMask::argmax_over(&out.seg_probs, &channels).ok()?;
    Some(PseudoLabel { mask, exist })
}

/// Existence targets of a mask: lane `c` exists iff any pixel carries label `c`.
pub fn exist_from_mask(mask: &IntMask) -> Vec<bool> {
    (1..=MAX_LANES as u8).map(|c| mask.count(c) > 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hough::HoughConfig;
    use crate::tensor::softmax_channels;

    fn uniform_probs(h: usize, w: usize) -> Tensor<f64> {
        Tensor::full(&[5, h, w], 0.2)
    }

    #[test]
    fn seg_loss_perfect_prediction_is_zero() {
        let mut mask = IntMask::zeros(2, 3);
        mask.set(1, 1, 2);
        let mut p = Tensor::<f64>::zeros(&[5, 2, 3]);
        for i in 0..6 {
            let lbl = mask.data()[i] as usize;
            p.data_mut()[lbl * 6 + i] = 1.0;
        }
        let (l, _) = seg_loss(&p, &mask, &LossConfig::default()).unwrap();
        assert!(l.abs() < 1e-7);
    }

    #[test]
    fn seg_loss_uniform_values() {
        let cfg = LossConfig::default();
        let (l, _) = seg_loss(&uniform_probs(4, 4), &IntMask::zeros(4, 4), &cfg).unwrap();
        assert!((l - 0.4 * -(0.2f64.ln())).abs() < 1e-6);
        assert!((l - 0.6438).abs() < 1e-4);
        let lane1 = IntMask::new(4, 4, vec![1; 16]).unwrap();
        let (l, _) = seg_loss(&uniform_probs(4, 4), &lane1, &cfg).unwrap();
        assert!((l - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn seg_loss_rejects_bad_labels() {
        let mask = IntMask::new(1, 2, vec![0, 7]).unwrap();
        let err = seg_loss(&uniform_probs(1, 2), &mask, &LossConfig::default()).unwrap_err();
        assert!(err.to_string().contains("col 1"), "{err}");
    }

    #[test]
    fn lane_loss_values() {
        let cfg = LossConfig::default();
        let half = Tensor::<f64>::full(&[4], 0.5);
        let (l, _) = lane_loss(&half, &[true, false, true, false], &cfg).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-6);
        let p = Tensor::<f64>::new(&[2], vec![0.9, 0.1]).unwrap();
        let (l, _) = lane_loss(&p, &[true, false], &cfg).unwrap();
        assert!((l - 0.1054).abs() < 1e-4);
        let p = Tensor::<f64>::new(&[2], vec![1.0, 0.0]).unwrap();
        let (l, _) = lane_loss(&p, &[true, false], &cfg).unwrap();
        assert!(l.abs() < 1e-7);
    }

    #[test]
    fn max_bin_term_examples() {
        let eps = 1e-8;
        let one_hot = [0.0, 0.0, 5.0, 0.0, 0.0f64];
        assert!(max_bin_term(&one_hot, 5, eps).unwrap().term.abs() < 1e-12);

        let uniform = vec![0.7f64; 43];
        let t = max_bin_term(&uniform, 43, eps).unwrap();
        assert!((t.term - 43f64.ln()).abs() < 1e-6);

        let rigged = [1.0, 3.0, 4.0, 2.0f64];
        let t = max_bin_term(&rigged, 4, eps).unwrap();
        assert_eq!(t.bin, BinIndex { theta_idx: 0, rho_idx: 2 });
        assert!((t.term - -(0.4f64.ln())).abs() < 1e-6);

        assert!(max_bin_term(&[0.0f64; 6], 3, eps).is_none());
    }

    #[test]
    fn ht_loss_gate_and_empty_channels() {
        let table = VoteTable::new(HoughConfig::new(4, 6, 7, 6).unwrap());
        let cfg = LossConfig::default();
        let logits = Tensor::<f64>::from_fn(&[5, 16, 24], |i| ((i * 37) % 11) as f64 * 0.3);
        let probs = softmax_channels(&logits).unwrap();
        let low = Tensor::full(&[4], 0.5);
        let r = ht_loss(&probs, &low, &table, &cfg).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad_logits.data().iter().all(|&v| v == 0.0));
        assert!(r.lanes.iter().all(|l| matches!(l, LaneHt::Gated { .. })));

        let mut empty = Tensor::<f64>::zeros(&[5, 16, 24]);
        empty.outer_mut(0).iter_mut().for_each(|v| *v = 1.0);
        let high = Tensor::full(&[4], 0.95);
        let r = ht_loss(&empty, &high, &table, &cfg).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.lanes.iter().all(|l| matches!(l, LaneHt::Skipped { .. })));
    }

    #[test]
    fn composition_is_linear() {
        let cfg = LossConfig::default();
        let b = LossBundle::compose(1.0, 0.5, 2.0, &cfg);
        assert!((b.l_total - 1.07).abs() < 1e-12);
    }

    #[test]
    fn pseudo_labels_require_confidence() {
        let probs = uniform_probs(2, 2);
        let out = ModelOutput {
            seg_logits: probs.clone(),
            seg_probs: probs.clone(),
            exist_p: Tensor::full(&[4], 0.9),
            features: Tensor::zeros(&[1, 1, 1]),
        };
        assert!(make_pseudo_labels(&out, &LossConfig::default()).is_none());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            tau: 1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            beta: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
