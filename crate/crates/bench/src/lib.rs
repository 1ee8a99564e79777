//! Shared fixtures for the benchmarks.

use alzhinet_core::image::Image;
use alzhinet_core::Tensor;

/// Deterministic pseudo-random values in [-1, 1], no RNG state needed.
pub fn wavy(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (0.7 * i as f64 + phase).sin()).collect()
}

pub fn tensor(shape: &[usize], phase: f64) -> Tensor {
    Tensor::new(shape.to_vec(), wavy(shape.iter().product(), phase)).expect("shape and data agree")
}

/// A 3-channel image with values in [0, 1].
pub fn image(size: usize) -> Image {
    let px = wavy(3 * size * size, 0.3).into_iter().map(|v| 0.5 + 0.5 * v).collect();
    Image::new(3, size, size, px).expect("shape and data agree")
}
