//! Shared fixtures for the criterion benches: a desk-default model with
//! random parameters and deterministic synthetic feature matrices.

use csnat_core::model::{DecoderMode, Model, ModelConfig};
use csnat_core::rng::SeededRng;
use csnat_core::tensor::Tensor;

pub const FEAT_DIM: usize = 16;
pub const VOCAB: usize = 40;

pub fn bench_model(mode: DecoderMode) -> Model {
    let config = ModelConfig::desk_default(FEAT_DIM, VOCAB, mode);
    Model::new(config, 7).expect("valid config")
}

pub fn bench_features(frames: usize, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let data = (0..frames * FEAT_DIM).map(|_| rng.normal()).collect();
    Tensor::new(vec![frames, FEAT_DIM], data).expect("consistent shape")
}
