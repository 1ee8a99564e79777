//! Seeded synthetic texture classes for desk-scale runs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::augment::splitmix64;
use crate::error::{Error, Result};
use crate::image::Image;

/// Recipe for a synthetic dataset. Class `k` is an oriented sinusoid whose
/// orientation and spatial frequency depend on `k`, with a bounded random
/// phase and i.i.d. Gaussian pixel noise per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Sample count for each class; its length is the number of classes.
    pub per_class: Vec<usize>,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Standard deviation of additive pixel noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Maximum absolute phase offset in radians.
    #[serde(default = "default_phase_jitter")]
    pub phase_jitter: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    32
}

fn default_channels() -> usize {
    1
}

fn default_noise() -> f64 {
    0.1
}

fn default_phase_jitter() -> f64 {
    0.6
}

impl SyntheticSpec {
    pub fn balanced(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            per_class: vec![per_class; classes],
            height: size,
            width: size,
            channels: default_channels(),
            noise: default_noise(),
            phase_jitter: default_phase_jitter(),
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class.len() < 2 {
            return Err(Error::Config("a synthetic dataset needs at least two classes".into()));
        }
        if self.per_class.contains(&0) {
            return Err(Error::Config("every synthetic class needs at least one sample".into()));
        }
        if self.height == 0 || self.width == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config(format!(
                "synthetic images must be 1 or 3 channels of positive size, got {}x{}x{}",
                self.channels, self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.phase_jitter >= 0.0) {
            return Err(Error::Config("synthetic noise and phase jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Orientation (radians) and cycles-per-image for class `k` of `classes`.
fn pattern(k: usize, classes: usize) -> (f64, f64) {
    let theta = PI * k as f64 / classes as f64;
    let cycles = 3.0 + (k % 2) as f64;
    (theta, cycles)
}

/// Generates the dataset described by `spec`. Samples are ordered by class.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let classes = spec.num_classes();
    let (h, w) = (spec.height, spec.width);
    let mut samples = Vec::with_capacity(spec.per_class.iter().sum());
    for (k, &count) in spec.per_class.iter().enumerate() {
        let (theta, cycles) = pattern(k, classes);
        let (ct, st) = (theta.cos(), theta.sin());
        let freq = 2.0 * PI * cycles / w.max(h) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ splitmix64(k as u64 + 1)));
        for _ in 0..count {
            let phase = spec.phase_jitter * (2.0 * rng.random::<f64>() - 1.0);
            let mut px = vec![0.0; spec.channels * h * w];
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5 + 0.35 * (freq * (x as f64 * ct + y as f64 * st) + phase).sin();
                    for ch in 0..spec.channels {
                        let z: f64 = rng.sample(StandardNormal);
                        px[(ch * h + y) * w + x] = (v + spec.noise * z).clamp(0.0, 1.0);
                    }
                }
            }
            samples.push(Sample { image: Image::new(spec.channels, h, w, px)?, label: k });
        }
    }
    let names = (0..classes).map(|k| format!("class_{k}")).collect();
    Dataset::new(samples, names, format!("synthetic(seed={})", spec.seed))
}
