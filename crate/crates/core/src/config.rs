//! `key = value` run configuration with `scene.`, `hough.`, `loss.` and
//! `train.` sections. Unknown keys are rejected.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synth::SceneConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 28] = [
        "scene.width",
        "scene.height",
        "scene.lanes_min",
        "scene.lanes_max",
        "scene.lane_width_min",
        "scene.lane_width_max",
        "scene.noise_min",
        "scene.noise_max",
        "scene.brightness_min",
        "scene.brightness_max",
        "scene.occlusion_prob",
        "scene.max_sagitta",
        "hough.preset",
        "loss.alpha",
        "loss.beta",
        "loss.tau",
        "loss.bg_weight",
        "loss.eps",
        "loss.pseudo_threshold",
        "loss.ht_on_labeled",
        "train.mode",
        "train.epochs_phase1",
        "train.epochs_phase2",
        "train.batch_size",
        "train.lr0",
        "train.decay_power",
        "train.clip_norm",
        "train.seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.scene;
        let t = &mut self.train;
        match key.trim() {
            "scene.width" => s.width = parse(key, v)?,
            "scene.height" => s.height = parse(key, v)?,
            "scene.lanes_min" => s.lanes_min = parse(key, v)?,
            "scene.lanes_max" => s.lanes_max = parse(key, v)?,
            "scene.lane_width_min" => s.lane_width_min = parse(key, v)?,
            "scene.lane_width_max" => s.lane_width_max = parse(key, v)?,
            "scene.noise_min" => s.noise_min = parse(key, v)?,
            "scene.noise_max" => s.noise_max = parse(key, v)?,
            "scene.brightness_min" => s.brightness_min = parse(key, v)?,
            "scene.brightness_max" => s.brightness_max = parse(key, v)?,
            "scene.occlusion_prob" => s.occlusion_prob = parse(key, v)?,
            "scene.max_sagitta" => s.max_sagitta = parse(key, v)?,
            "hough.preset" => t.hough = parse(key, v)?,
            "loss.alpha" => t.loss.alpha = parse(key, v)?,
            "loss.beta" => t.loss.beta = parse(key, v)?,
            "loss.tau" => t.loss.tau = parse(key, v)?,
            "loss.bg_weight" => t.loss.bg_weight = parse(key, v)?,
            "loss.eps" => t.loss.eps = parse(key, v)?,
            "loss.pseudo_threshold" => t.loss.pseudo_threshold = parse(key, v)?,
            "loss.ht_on_labeled" => t.loss.ht_on_labeled = parse_bool(key, v)?,
            "train.mode" => t.mode = parse(key, v)?,
            "train.epochs_phase1" => t.epochs_phase1 = parse(key, v)?,
            "train.epochs_phase2" => t.epochs_phase2 = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.lr0" => t.lr0 = parse(key, v)?,
            "train.decay_power" => t.decay_power = parse(key, v)?,
            "train.clip_norm" => t.clip_norm = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.train.validate()
    }

    /// Every key with its value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let s = &self.scene;
        let t = &self.train;
        let l = &t.loss;
        let values: [String; 28] = [
            s.width.to_string(),
            s.height.to_string(),
            s.lanes_min.to_string(),
            s.lanes_max.to_string(),
            s.lane_width_min.to_string(),
            s.lane_width_max.to_string(),
            s.noise_min.to_string(),
            s.noise_max.to_string(),
            s.brightness_min.to_string(),
            s.brightness_max.to_string(),
            s.occlusion_prob.to_string(),
            s.max_sagitta.to_string(),
            t.hough.to_string(),
            l.alpha.to_string(),
            l.beta.to_string(),
            l.tau.to_string(),
            l.bg_weight.to_string(),
            l.eps.to_string(),
            l.pseudo_threshold.to_string(),
            l.ht_on_labeled.to_string(),
            t.mode.to_string(),
            t.epochs_phase1.to_string(),
            t.epochs_phase2.to_string(),
            t.batch_size.to_string(),
            t.lr0.to_string(),
            t.decay_power.to_string(),
            t.clip_norm.to_string(),
            t.seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
