//! Image augmentations and pseudo-volume construction.
//!
//! A volume is built by applying each augmentation in a roster to the same
//! original image and stacking the results along a depth axis. Every
//! stochastic kernel draws from a stream derived from a [`SeedContext`], so a
//! volume is a pure function of the image, the roster and the context.

pub mod kernels;
mod seed;

use serde::{Deserialize, Serialize};

pub use kernels::{
    brightness, color_jitter, contrast, elastic_deform, gaussian_blur, gaussian_noise, invert, occlude, salt_pepper,
    sharpness,
};
pub use seed::{derive_stream, splitmix64, SeedContext, Stream};

use crate::error::{Error, Result};
use crate::image::Image;

/// One training-time augmentation with its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugSpec {
    Elastic { alpha: f64, sigma: f64 },
    Invert,
    Sharpness { factor: f64 },
    SaltPepper { amount: f64 },
    Brightness { delta: f64 },
    ColorJitter { strength: f64 },
    GaussianNoise { sigma: f64 },
    GaussianBlur { sigma: f64 },
    Occlusion { area_fraction: f64 },
}

impl AugSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Elastic { .. } => "elastic",
            Self::Invert => "invert",
            Self::Sharpness { .. } => "sharpness",
            Self::SaltPepper { .. } => "salt_pepper",
            Self::Brightness { .. } => "brightness",
            Self::ColorJitter { .. } => "color_jitter",
            Self::GaussianNoise { .. } => "gaussian_noise",
            Self::GaussianBlur { .. } => "gaussian_blur",
            Self::Occlusion { .. } => "occlusion",
        }
    }

    /// Checks parameters against each kind's valid range.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Elastic { alpha, sigma } => alpha >= 0.0 && alpha.is_finite() && sigma > 0.0 && sigma.is_finite(),
            Self::Invert => true,
            Self::Sharpness { factor } => factor >= 0.0 && factor.is_finite(),
            Self::SaltPepper { amount } => (0.0..=1.0).contains(&amount),
            Self::Brightness { delta } => (-1.0..=1.0).contains(&delta),
            Self::ColorJitter { strength } => (0.0..=1.0).contains(&strength),
            Self::GaussianNoise { sigma } => sigma >= 0.0 && sigma.is_finite(),
            Self::GaussianBlur { sigma } => sigma > 0.0 && sigma.is_finite(),
            Self::Occlusion { area_fraction } => area_fraction > 0.0 && area_fraction < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("augmentation parameters out of range: {self:?}")))
        }
    }

    /// Applies this augmentation to `img`, drawing randomness from `rng`.
    pub fn apply(&self, img: &Image, rng: &mut Stream) -> Image {
        match *self {
            Self::Elastic { alpha, sigma } => elastic_deform(img, alpha, sigma, rng),
            Self::Invert => invert(img),
            Self::Sharpness { factor } => sharpness(img, factor),
            Self::SaltPepper { amount } => salt_pepper(img, amount, rng),
            Self::Brightness { delta } => brightness(img, delta),
            Self::ColorJitter { strength } => color_jitter(img, strength, rng),
            Self::GaussianNoise { sigma } => gaussian_noise(img, sigma, rng),
            Self::GaussianBlur { sigma } => gaussian_blur(img, sigma),
            Self::Occlusion { area_fraction } => occlude(img, area_fraction, rng),
        }
    }
}

/// The nine augmentation kinds with default parameters, in roster order.
pub fn default_roster() -> Vec<AugSpec> {
    vec![
        AugSpec::Elastic { alpha: 8.0, sigma: 4.0 },
        AugSpec::Invert,
        AugSpec::Sharpness { factor: 2.0 },
        AugSpec::SaltPepper { amount: 0.01 },
        AugSpec::Brightness { delta: 0.1 },
        AugSpec::ColorJitter { strength: 0.2 },
        AugSpec::GaussianNoise { sigma: 0.05 },
        AugSpec::GaussianBlur { sigma: 1.0 },
        AugSpec::Occlusion { area_fraction: 0.04 },
    ]
}

/// The first `n` kinds of the default roster (the 3- and 6-slice ablations).
pub fn roster_prefix(n: usize) -> Result<Vec<AugSpec>> {
    let all = default_roster();
    if n == 0 || n > all.len() {
        return Err(Error::Parameter(format!("roster size must be in 1..=9, got {n}")));
    }
    Ok(all[..n].to_vec())
}

/// A stack of equally sized images along a depth axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    slices: Vec<Image>,
}

impl Volume {
    pub fn from_slices(slices: Vec<Image>) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(Error::Parameter("a volume needs at least one slice".into()));
        };
        if let Some(bad) = slices.iter().position(|s| s.dims() != first.dims()) {
            return Err(Error::Dimension(format!(
                "slice {bad} is {:?}, slice 0 is {:?}",
                slices[bad].dims(),
                first.dims()
            )));
        }
        Ok(Self { slices })
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    pub fn channels(&self) -> usize {
        self.slices[0].channels()
    }

    pub fn height(&self) -> usize {
        self.slices[0].height()
    }

    pub fn width(&self) -> usize {
        self.slices[0].width()
    }

    pub fn slice(&self, d: usize) -> &Image {
        &self.slices[d]
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    /// Voxels in `[C, D, H, W]` order, the layout the 3D encoder consumes.
    pub fn to_cdhw(&self) -> Vec<f64> {
        let (c, d, hw) = (self.channels(), self.depth(), self.height() * self.width());
        let mut out = Vec::with_capacity(c * d * hw);
        for ch in 0..c {
            for s in &self.slices {
                out.extend_from_slice(s.plane(ch));
            }
        }
        out
    }
}

/// Stacks `roster[i](img)` for every `i`, each drawn from the stream of
/// `ctx` with `aug_index = i`.
pub fn build_volume(img: &Image, roster: &[AugSpec], ctx: SeedContext) -> Result<Volume> {
    if roster.is_empty() {
        return Err(Error::Parameter("augmentation roster is empty".into()));
    }
    for spec in roster {
        spec.validate()?;
    }
    let slices = roster
        .iter()
        .enumerate()
        .map(|(i, spec)| spec.apply(img, &mut derive_stream(ctx.with_aug(i as u64))))
        .collect();
    Volume::from_slices(slices)
}
