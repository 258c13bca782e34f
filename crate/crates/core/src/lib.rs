//! Hough-space line priors for lane detection.
//!
//! The crate bundles a small dense-tensor substrate with explicit
//! forward/backward kernels, an exactly-adjoint Hough / inverse-Hough
//! transform pair, a trainable HT-IHT feature block, a compact
//! encoder-decoder lane network, the segmentation / existence / Hough max-bin
//! losses, a synthetic lane-scene generator, and a deterministic two-phase
//! semi-supervised trainer.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hough;
pub mod losses;
pub mod mask;
pub mod model;
pub mod pnm;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use hough::{global_argmax, BinIndex, HoughConfig, HoughPreset, VoteTable};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataset::{load_dataset, save_dataset, Dataset};
pub use losses::{LossBundle, LossConfig};
pub use mask::IntMask;
pub use synth::{gen_sample, split_dataset, Sample, SceneConfig};
pub use eval::Metrics;
pub use trainer::{lr_at, train, evaluate, Mode, TrainConfig};
pub use tensor::{Scalar, Tensor};
