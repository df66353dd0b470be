//! Shared fixtures for the criterion benches.

use duostream_core::{Model, ModelConfig, Tensor};

/// Deterministic pseudo-image batch in `[0, 1]`.
pub fn images(n: usize, channels: usize, size: usize) -> Tensor {
    Tensor::from_fn([n, channels, size, size], |i| 0.5 + 0.5 * ((i as f64) * 0.618_033_988_7).sin())
}

pub fn filled(shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| scale * ((i as f64) * 1.414_213_562_4 + 0.3).cos())
}

pub fn miniature(num_classes: usize) -> Model {
    Model::new(ModelConfig { num_classes, ..ModelConfig::miniature() }).expect("miniature config is valid")
}
