//! Shared fixtures for the benchmarks.

use seld_core::data::{synth_scene, Scene, SynthConfig};
use seld_core::model::{init_params, ModelConfig, ParamSet};
use seld_core::numeric::rng_from_seed;
use seld_core::Tensor;

/// Deterministic pseudo-random tensor in [-1, 1).
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape.to_vec(), |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
    })
}

pub fn scene(seconds: f64) -> Scene {
    let cfg = SynthConfig { duration: seconds, ..SynthConfig::default() };
    synth_scene(&mut rng_from_seed(0), &cfg).expect("synthesis")
}

pub fn model(cfg: &ModelConfig) -> ParamSet<f32> {
    init_params(cfg, &mut rng_from_seed(0)).expect("init")
}
