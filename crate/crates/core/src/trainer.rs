//! Two-phase training: supervised warm-up on the labeled samples, then mixed
//! labeled/unlabeled batches driven by the Hough loss and/or pseudo-labels.
//!
//! Per-sample forward/backward passes may run on worker threads; gradients
//! are always summed in batch order before the single SGD step, so results do
//! not depend on the number of threads.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{hard_prediction, Metrics, Tally};
use crate::hough::{HoughPreset, VoteTable};
use crate::losses::{make_pseudo_labels, total_loss, LossBundle, LossConfig, PseudoLabel, Supervision};
use crate::model::{backward, forward, image_dims, init_params, predict, ModelParams};
use crate::synth::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Supervised,
    Ht,
    Pseudo,
    PseudoHt,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Supervised, Mode::Ht, Mode::Pseudo, Mode::PseudoHt];

    pub fn uses_ht(self) -> bool {
        matches!(self, Mode::Ht | Mode::PseudoHt)
    }

    pub fn uses_pseudo(self) -> bool {
        matches!(self, Mode::Pseudo | Mode::PseudoHt)
    }

    pub fn needs_unlabeled(self) -> bool {
        self != Mode::Supervised
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Supervised => "supervised",
            Mode::Ht => "ht",
            Mode::Pseudo => "pseudo",
            Mode::PseudoHt => "pseudo_ht",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (supervised, ht, pseudo, pseudo_ht)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_power: f64,
    /// Batch gradients with a larger global L2 norm are rescaled to it; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub hough: HoughPreset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Supervised,
            epochs_phase1: 40,
            epochs_phase2: 10,
            batch_size: 8,
            lr0: 0.1,
            decay_power: 0.9,
            clip_norm: 5.0,
            seed: 0,
            loss: LossConfig::default(),
            hough: HoughPreset::Desk,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_phase1 == 0 || (self.mode.needs_unlabeled() && self.epochs_phase2 == 0) {
            return Err(Error::Config("every phase needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.decay_power >= 0.0) {
            return Err(Error::Config("lr0 must be positive and decay_power non-negative".into()));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config("clip_norm must be finite and non-negative".into()));
        }
        self.loss.validate()
    }

    /// Epochs over the whole run; the decay horizon `T`.
    pub fn total_epochs(&self) -> usize {
        if self.mode.needs_unlabeled() {
            self.epochs_phase1 + self.epochs_phase2
        } else {
            self.epochs_phase1
        }
    }
}

/// `lr0·(1 − t/T)^power`
pub fn lr_at(t: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Config(format!("learning-rate step {t} outside 0..={total}")));
    }
    Ok(cfg.lr0 * (1.0 - t as f64 / total as f64).powf(cfg.decay_power))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
        })
    }
}

/// Mean losses and prediction scores of one split over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: usize,
    pub split: Split,
    pub losses: LossBundle,
    pub metrics: Metrics,
    pub lr: f64,
}

pub const CSV_HEADER: &str = "epoch,phase,split,l_seg,l_lane,l_ht,l_total,lane_f1,pixel_f1,exist_acc,lr";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let m = &self.metrics;
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:e}",
            self.epoch,
            self.phase,
            self.split,
            l.l_seg,
            l.l_lane,
            l.l_ht,
            l.l_total,
            m.lane_f1,
            m.pixel_f1,
            m.exist_acc,
            self.lr
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    /// Epochs completed.
    pub epochs: usize,
    /// Continuation seed drawn from the shuffling generator after the last epoch.
    pub rng_state: [u64; 4],
}

/// Which sample a batch slot holds and what it is trained against.
#[derive(Clone, Copy)]
enum Slot {
    Labeled(usize),
    Unlabeled(usize),
}

struct SampleResult {
    grads: ModelParams<f32>,
    losses: LossBundle,
    tally: Tally,
}

struct EpochTotals {
    losses: LossBundle,
    tally: Tally,
    count: usize,
}

impl EpochTotals {
    fn new() -> Self {
        EpochTotals {
            losses: LossBundle::default(),
            tally: Tally::default(),
            count: 0,
        }
    }

    fn add(&mut self, r: &SampleResult) {
        self.losses.l_seg += r.losses.l_seg;
        self.losses.l_lane += r.losses.l_lane;
        self.losses.l_ht += r.losses.l_ht;
        self.losses.l_total += r.losses.l_total;
        self.tally.add(&r.tally);
        self.count += 1;
    }

    fn record(&self, epoch: usize, phase: usize, split: Split, lr: f64) -> EpochRecord {
        let n = self.count.max(1) as f64;
        let l = &self.losses;
        EpochRecord {
            epoch,
            phase,
            split,
            losses: LossBundle {
                l_seg: l.l_seg / n,
                l_lane: l.l_lane / n,
                l_ht: l.l_ht / n,
                l_total: l.l_total / n,
            },
            metrics: self.tally.metrics(),
            lr,
        }
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    table: VoteTable,
    labeled: Vec<&'a Sample>,
    unlabeled: Vec<&'a Sample>,
    pseudo: Vec<Option<PseudoLabel>>,
    params: ModelParams<f32>,
    rng: ChaCha8Rng,
    batch_counter: usize,
}

impl<'a> Trainer<'a> {
    fn run_sample(&self, slot: Slot, use_ht: bool) -> Result<SampleResult> {
        let (sample, supervision) = match slot {
            Slot::Labeled(i) => {
                let s = self.labeled[i];
                (
                    s,
                    Supervision::Labeled {
                        mask: &s.mask,
                        exist: &s.exist,
                    },
                )
            }
            Slot::Unlabeled(i) => (
                self.unlabeled[i],
                Supervision::Unlabeled {
                    pseudo: self.pseudo.get(i).and_then(Option::as_ref),
                },
            ),
        };
        let (out, cache) = forward(&self.params, &sample.image, &self.table)?;
        let loss = total_loss(&out, supervision, &self.table, &self.cfg.loss, use_ht)?;
        let (grads, _) = backward(&self.params, &self.table, &cache, &loss.grad_logits, &loss.grad_exist)?;
        let tally = Tally::from_output(&out, sample)?;
        Ok(SampleResult {
            grads,
            losses: loss.bundle,
            tally,
        })
    }

    /// One SGD step on the batch mean; returns per-slot results in batch order.
    fn step(&mut self, batch: &[Slot], use_ht: bool, lr: f64, epoch: usize) -> Result<Vec<(Slot, SampleResult)>> {
        let batch_id = self.batch_counter;
        self.batch_counter += 1;
        let results: Vec<Result<SampleResult>> = batch
            .par_iter()
            .map(|&slot| self.run_sample(slot, use_ht))
            .collect();
        let mut out = Vec::with_capacity(batch.len());
        let mut sum: Option<ModelParams<f32>> = None;
        for (slot, r) in batch.iter().zip(results) {
            let r = r?;
            if !r.losses.is_finite() || !r.grads.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_id,
                });
            }
            match &mut sum {
                Some(s) => s.add_assign(&r.grads)?,
                None => sum = Some(r.grads.clone()),
            }
            out.push((*slot, r));
        }
        let mut grads = sum.expect("batches are never empty");
        grads.scale(1.0 / batch.len() as f32);
        if self.cfg.clip_norm > 0.0 {
            let norm = grads.l2_norm();
            if norm > self.cfg.clip_norm {
                grads.scale((self.cfg.clip_norm / norm) as f32);
            }
        }
        self.params.sgd_step(&grads, lr as f32)?;
        if !self.params.all_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: batch_id,
            });
        }
        Ok(out)
    }
}

fn check_images(dataset: &Dataset, table: &VoteTable) -> Result<()> {
    let [_, h, w] = image_dims(table);
    if let Some(s) = dataset.samples.iter().find(|s| s.image.dims() != [1, h, w]) {
        return Err(Error::Config(format!(
            "sample {} is {:?} but the Hough preset needs 1x{h}x{w} images",
            s.id,
            s.image.dims()
        )));
    }
    Ok(())
}

/// Trains from scratch on `dataset`, using each sample's `labeled` flag.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, cfg, init_params(cfg.seed), |_| {})
}

/// Like [`train`], starting from `params` and reporting each finished epoch.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    params: ModelParams<f32>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let table = VoteTable::new(cfg.hough.config());
    check_images(dataset, &table)?;
    let labeled: Vec<&Sample> = dataset.samples.iter().filter(|s| s.labeled).collect();
    let unlabeled: Vec<&Sample> = dataset.samples.iter().filter(|s| !s.labeled).collect();
    if labeled.is_empty() {
        return Err(Error::Data("training needs at least one labeled sample".into()));
    }
    if cfg.mode.needs_unlabeled() && unlabeled.is_empty() {
        return Err(Error::Data(format!("{} mode requires unlabeled data", cfg.mode)));
    }

    let mut t = Trainer {
        cfg,
        table,
        labeled,
        unlabeled,
        pseudo: Vec::new(),
        params,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_45),
        batch_counter: 0,
    };
    let total = cfg.total_epochs();
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs_phase1 {
        let lr = lr_at(epoch, total, cfg)?;
        let mut order: Vec<usize> = (0..t.labeled.len()).collect();
        order.shuffle(&mut t.rng);
        let mut totals = EpochTotals::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Slot> = chunk.iter().map(|&i| Slot::Labeled(i)).collect();
            for (_, r) in t.step(&batch, false, lr, epoch)? {
                totals.add(&r);
            }
        }
        let rec = totals.record(epoch, 1, Split::Labeled, lr);
        on_epoch(&rec);
        history.push(rec);
    }

    if cfg.mode.needs_unlabeled() {
        if cfg.mode.uses_pseudo() {
            let params = &t.params;
            let table = &t.table;
            t.pseudo = t
                .unlabeled
                .par_iter()
                .map(|s| predict(params, &s.image, table).map(|out| make_pseudo_labels(&out, &cfg.loss)))
                .collect::<Result<_>>()?;
        }
        let n_unl = cfg.batch_size / 2;
        let n_lab = cfg.batch_size - n_unl;
        let mut unl_order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        for e in 0..cfg.epochs_phase2 {
            let epoch = cfg.epochs_phase1 + e;
            let lr = lr_at(epoch, total, cfg)?;
            let mut order: Vec<usize> = (0..t.labeled.len()).collect();
            order.shuffle(&mut t.rng);
            let mut lab_totals = EpochTotals::new();
            let mut unl_totals = EpochTotals::new();
            for chunk in order.chunks(n_lab) {
                let mut batch: Vec<Slot> = chunk.iter().map(|&i| Slot::Labeled(i)).collect();
                for _ in 0..n_unl {
                    if cursor == unl_order.len() {
                        unl_order = (0..t.unlabeled.len()).collect();
                        unl_order.shuffle(&mut t.rng);
                        cursor = 0;
                    }
                    batch.push(Slot::Unlabeled(unl_order[cursor]));
                    cursor += 1;
                }
                for (slot, r) in t.step(&batch, cfg.mode.uses_ht(), lr, epoch)? {
                    match slot {
                        Slot::Labeled(_) => lab_totals.add(&r),
                        Slot::Unlabeled(_) => unl_totals.add(&r),
                    }
                }
            }
            for rec in [
                lab_totals.record(epoch, 2, Split::Labeled, lr),
                unl_totals.record(epoch, 2, Split::Unlabeled, lr),
            ] {
                on_epoch(&rec);
                history.push(rec);
            }
        }
    }

    let rng_state = [0; 4].map(|_: u64| t.rng.random::<u64>());
    Ok(TrainOutcome {
        params: t.params,
        history,
        epochs: total,
        rng_state,
    })
}

/// Scores `params` on every sample of `dataset` without modifying anything.
pub fn evaluate(params: &ModelParams<f32>, preset: HoughPreset, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let table = VoteTable::new(preset.config());
    check_images(dataset, &table)?;
    let tallies: Vec<Tally> = dataset
        .samples
        .par_iter()
        .map(|s| {
            let out = predict(params, &s.image, &table)?;
            let (mask, exist) = hard_prediction(&out)?;
            Tally::from_hard(&mask, &exist, &s.mask, &s.exist)
        })
        .collect::<Result<_>>()?;
    let mut total = Tally::default();
    for t in &tallies {
        total.add(t);
    }
    Ok(total.metrics())
}
