//! Deterministic per-(epoch, sample, augmentation) random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The random stream type handed to every stochastic kernel.
pub type Stream = ChaCha8Rng;

/// Coordinates of one random stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedContext {
    pub global_seed: u64,
    pub epoch: u64,
    pub sample_index: u64,
    pub aug_index: u64,
}

impl SeedContext {
    pub fn new(global_seed: u64, epoch: u64, sample_index: u64, aug_index: u64) -> Self {
        Self { global_seed, epoch, sample_index, aug_index }
    }

    pub fn with_aug(self, aug_index: u64) -> Self {
        Self { aug_index, ..self }
    }

    /// Stream seed: `splitmix64(global ^ mix(epoch) ^ mix(sample) ^ mix(aug))`.
    pub fn stream_seed(&self) -> u64 {
        splitmix64(self.global_seed ^ mix(self.epoch, 1) ^ mix(self.sample_index, 2) ^ mix(self.aug_index, 3))
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// Each field is mixed with its own lane offset; with a shared mix, swapping
// epoch and sample index would collide.
fn mix(value: u64, lane: u64) -> u64 {
    splitmix64(value.wrapping_add(lane.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

/// The stream for `ctx`. Same context, same stream, on every platform.
pub fn derive_stream(ctx: SeedContext) -> Stream {
    ChaCha8Rng::seed_from_u64(ctx.stream_seed())
}
