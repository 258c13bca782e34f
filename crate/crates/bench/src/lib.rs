//! Shared fixtures for the criterion benchmarks.

use htlane::model::{init_params, ModelParams};
use htlane::synth::gen_sample;
use htlane::tensor::kaiming_uniform;
use htlane::{HoughPreset, SceneConfig, Tensor, VoteTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform values in roughly `[-1, 1]`, reproducible per seed.
pub fn random(dims: &[usize], seed: u64) -> Tensor<f32> {
    kaiming_uniform(dims, 6, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub struct ModelFixture {
    pub table: VoteTable,
    pub params: ModelParams<f32>,
    pub image: Tensor<f32>,
}

/// Freshly initialized network and one synthetic scene at the given scale.
/// The `paper` preset gets a scene sized to its larger grid.
pub fn model_fixture(preset: HoughPreset) -> ModelFixture {
    let table = VoteTable::new(preset.config());
    let c = table.config();
    let scene = SceneConfig {
        height: 4 * c.height,
        width: 4 * c.width,
        ..SceneConfig::default()
    };
    ModelFixture {
        params: init_params(0),
        image: gen_sample(7, &scene).image,
        table,
    }
}
