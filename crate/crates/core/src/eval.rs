//! Pixel-level and lane-level detection scores plus existence accuracy.

use crate::error::{Error, Result};
use crate::mask::IntMask;
use crate::model::ModelOutput;
use crate::synth::Sample;
use crate::tensor::Scalar;

pub const IOU_THRESHOLD: f64 = 0.5;
pub const EXIST_THRESHOLD: f64 = 0.5;

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion counts with derived rates; every 0/0 is 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn same_size(op: &'static str, a: &IntMask, b: &IntMask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            op,
            format!(
                "{}x{} vs {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            ),
        ));
    }
    Ok(())
}

/// Lane-vs-background confusion over all pixels.
pub fn pixel_counts(pred: &IntMask, truth: &IntMask) -> Result<Counts> {
    same_size("pixel_counts", pred, truth)?;
    let mut c = Counts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p > 0, t > 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// IoU of the pixels labeled `la` in `a` and `lb` in `b`; 0 when both are empty.
pub fn iou(a: &IntMask, la: u8, b: &IntMask, lb: u8) -> Result<f64> {
    same_size("iou", a, b)?;
    let (mut inter, mut union) = (0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x == la, y == lb);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(ratio(inter, union))
}

/// Index-matched lane detection: predicted lane `c` is a true positive when
/// lane `c` exists in the truth and the masks overlap with IoU ≥ `threshold`.
pub fn lane_counts(
    pred_mask: &IntMask,
    pred_exist: &[bool],
    truth_mask: &IntMask,
    truth_exist: &[bool],
    threshold: f64,
) -> Result<Counts> {
    same_size("lane_counts", pred_mask, truth_mask)?;
    if pred_exist.len() != truth_exist.len() {
        return Err(Error::shape(
            "lane_counts",
            format!("{} predicted vs {} true lanes", pred_exist.len(), truth_exist.len()),
        ));
    }
    let mut c = Counts::default();
    for (i, (&p, &t)) in pred_exist.iter().zip(truth_exist).enumerate() {
        let label = i as u8 + 1;
        let hit = p && t && iou(pred_mask, label, truth_mask, label)? >= threshold;
        if hit {
            c.tp += 1;
        } else {
            c.fp += usize::from(p);
            c.fn_ += usize::from(t);
        }
    }
    Ok(c)
}

pub fn exist_correct(pred: &[bool], truth: &[bool]) -> usize {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub pixel_precision: f64,
    pub pixel_recall: f64,
    pub pixel_f1: f64,
    pub lane_precision: f64,
    pub lane_recall: f64,
    pub lane_f1: f64,
    pub exist_acc: f64,
    pub pixel: Counts,
    pub lane: Counts,
    pub exist_hits: usize,
    pub exist_total: usize,
    pub samples: usize,
}

/// Running totals; combine per-sample tallies in a fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub pixel: Counts,
    pub lane: Counts,
    pub exist_hits: usize,
    pub exist_total: usize,
    pub samples: usize,
}

impl Tally {
    /// Scores one prediction given as a hard mask and existence bits.
    pub fn from_hard(
        pred_mask: &IntMask,
        pred_exist: &[bool],
        truth_mask: &IntMask,
        truth_exist: &[bool],
    ) -> Result<Self> {
        Ok(Tally {
            pixel: pixel_counts(pred_mask, truth_mask)?,
            lane: lane_counts(pred_mask, pred_exist, truth_mask, truth_exist, IOU_THRESHOLD)?,
            exist_hits: exist_correct(pred_exist, truth_exist),
            exist_total: truth_exist.len(),
            samples: 1,
        })
    }

    pub fn from_output<T: Scalar>(out: &ModelOutput<T>, truth: &Sample) -> Result<Self> {
        let (mask, exist) = hard_prediction(out)?;
        Self::from_hard(&mask, &exist, &truth.mask, &truth.exist)
    }

    pub fn add(&mut self, other: &Tally) {
        self.pixel.add(other.pixel);
        self.lane.add(other.lane);
        self.exist_hits += other.exist_hits;
        self.exist_total += other.exist_total;
        self.samples += other.samples;
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            pixel_precision: self.pixel.precision(),
            pixel_recall: self.pixel.recall(),
            pixel_f1: self.pixel.f1(),
            lane_precision: self.lane.precision(),
            lane_recall: self.lane.recall(),
            lane_f1: self.lane.f1(),
            exist_acc: ratio(self.exist_hits, self.exist_total),
            pixel: self.pixel,
            lane: self.lane,
            exist_hits: self.exist_hits,
            exist_total: self.exist_total,
            samples: self.samples,
        }
    }
}

/// Per-pixel argmax mask and thresholded existence bits of a prediction.
pub fn hard_prediction<T: Scalar>(out: &ModelOutput<T>) -> Result<(IntMask, Vec<bool>)> {
    let mask = IntMask::argmax_of(&out.seg_probs)?;
    let exist = out
        .exist_p
        .data()
        .iter()
        .map(|&p| p.as_f64() > EXIST_THRESHOLD)
        .collect();
    Ok((mask, exist))
}
