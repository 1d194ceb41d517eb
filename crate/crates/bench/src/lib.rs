//! Benchmark fixtures shared by the criterion benches.

use tgda_core::models::{preset, Model};
use tgda_core::{RngStream, Tensor};

/// A freshly initialized preset.
pub fn model(arch: &str, classes: usize, input: usize) -> Model<f32> {
    let spec = preset(arch, classes, input).expect("known preset");
    Model::build(&spec, 0).expect("preset builds")
}

/// Standard-normal `(n, 3, size, size)` batch.
pub fn batch(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    RngStream::new(seed).normal_tensor(&[n, 3, size, size], 1.0)
}

/// `[0, 1]` image of one sample.
pub fn image(size: usize, seed: u64) -> Tensor<f32> {
    RngStream::new(seed).uniform_tensor(&[3, size, size], 0.0, 1.0)
}
