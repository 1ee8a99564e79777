//! Run configuration: a strict JSON document resolved into the settings
//! every subcommand works from.

use std::path::{Path, PathBuf};

use alzhinet_core::augment::{default_roster, roster_prefix};
use alzhinet_core::data::{SplitSpec, SyntheticSpec};
use alzhinet_core::model::{ThreeDNetConfig, TwoDNetConfig};
use alzhinet_core::robustness::{default_grids, Family, PerturbationGrid};
use alzhinet_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::fail::Fail;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub augment: AugmentSection,
    pub sweep: SweepSection,
    pub output_dir: PathBuf,
    /// The run seed. Overrides `train.seed` and drives weight
    /// initialization, augmentation and perturbation streams.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            augment: AugmentSection::default(),
            sweep: SweepSection::default(),
            output_dir: PathBuf::from("out"),
            seed: None,
        }
    }
}

/// Where samples come from: an image tree or a synthetic recipe, never both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    /// Side length every image is resized to.
    pub image_size: usize,
    pub split: SplitSpec,
    /// Raise minority classes of the training part to the largest count.
    pub oversample: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: None, synthetic: None, image_size: 32, split: SplitSpec::default(), oversample: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Fraction of the canonical channel widths, shared by both networks.
    pub width_multiplier: f64,
    pub blocks_per_stage: Vec<usize>,
    pub hidden_width: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { width_multiplier: 0.125, blocks_per_stage: vec![2, 2, 2, 2], hidden_width: None }
    }
}

impl ModelSection {
    pub fn two_d(&self, classes: usize) -> TwoDNetConfig {
        TwoDNetConfig {
            blocks_per_stage: self.blocks_per_stage.clone(),
            ..TwoDNetConfig::new(classes, self.width_multiplier)
        }
    }

    pub fn three_d(&self, classes: usize) -> ThreeDNetConfig {
        ThreeDNetConfig { hidden_width: self.hidden_width, ..ThreeDNetConfig::new(classes, self.width_multiplier) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    /// Use the first `n` kinds of the default roster instead of
    /// `train.roster`.
    pub roster_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Explicit grids; the six standard grids when absent.
    pub grids: Option<Vec<PerturbationGrid>>,
    /// Keep only these families (full names or unique prefixes).
    pub families: Option<Vec<String>>,
}

/// Reads a config file. Parse errors name the offending key path.
pub fn read(path: &Path) -> Result<RunConfig, Fail> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Fail::config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<RunConfig, Fail> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        Fail::config(format!("at `{key}`: {}", e.into_inner()))
    })
}

/// Matches a family by full name or by a prefix shared with no other family.
pub fn parse_family(name: &str) -> Result<Family, Fail> {
    if let Ok(f) = Family::parse(name) {
        return Ok(f);
    }
    let hits: Vec<Family> = Family::ALL.into_iter().filter(|f| f.name().starts_with(name)).collect();
    match hits.as_slice() {
        [f] => Ok(*f),
        [] => Err(Fail::config(format!("at `sweep.families`: unknown perturbation family {name:?}"))),
        _ => Err(Fail::config(format!("at `sweep.families`: {name:?} matches several families"))),
    }
}

impl RunConfig {
    /// Applies command-line overrides and fills every derived field, so the
    /// result is exactly what the run uses.
    pub fn resolve(
        mut self,
        seed: Option<u64>,
        output: Option<PathBuf>,
        families: Option<Vec<String>>,
    ) -> Result<Self, Fail> {
        let seed = seed.or(self.seed).unwrap_or(self.train.seed);
        self.seed = Some(seed);
        self.train.seed = seed;
        if let Some(out) = output {
            self.output_dir = out;
        }
        if let Some(n) = self.augment.roster_size {
            let prefix = roster_prefix(n).map_err(|e| Fail::config(format!("at `augment.roster_size`: {e}")))?;
            if self.train.roster != default_roster() && self.train.roster != prefix {
                return Err(Fail::config("at `augment.roster_size`: conflicts with an explicit `train.roster`"));
            }
            self.train.roster = prefix;
        }
        if self.data.dir.is_none() && self.data.synthetic.is_none() {
            self.data.synthetic = Some(SyntheticSpec::balanced(4, 75, self.data.image_size, 0));
        }
        if let Some(f) = families {
            self.sweep.families = Some(f);
        }
        let mut grids = self.sweep.grids.take().unwrap_or_else(default_grids);
        if let Some(names) = &self.sweep.families {
            let keep = names.iter().map(|n| parse_family(n)).collect::<Result<Vec<_>, _>>()?;
            grids.retain(|g| keep.contains(&g.family));
            self.sweep.families = Some(keep.iter().map(|f| f.name().to_string()).collect());
        }
        for g in &grids {
            g.validate().map_err(|e| Fail::config(format!("at `sweep.grids`: {e}")))?;
        }
        self.sweep.grids = Some(grids);
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), Fail> {
        self.train.validate().map_err(|e| Fail::config(format!("at `train`: {e}")))?;
        if self.data.dir.is_some() && self.data.synthetic.is_some() {
            return Err(Fail::config("at `data`: set either `dir` or `synthetic`, not both"));
        }
        if let Some(s) = &self.data.synthetic {
            s.validate().map_err(|e| Fail::config(format!("at `data.synthetic`: {e}")))?;
        }
        if self.data.image_size < 8 {
            return Err(Fail::config(format!(
                "at `data.image_size`: must be at least 8, got {}",
                self.data.image_size
            )));
        }
        if !(self.data.split.train_fraction > 0.0 && self.data.split.train_fraction < 1.0) {
            return Err(Fail::config(format!(
                "at `data.split.train_fraction`: must be in (0, 1), got {}",
                self.data.split.train_fraction
            )));
        }
        self.model.two_d(2).validate().map_err(|e| Fail::config(format!("at `model`: {e}")))?;
        self.model.three_d(2).validate().map_err(|e| Fail::config(format!("at `model`: {e}")))?;
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn grids(&self) -> Vec<PerturbationGrid> {
        self.sweep.grids.clone().unwrap_or_else(default_grids)
    }
}
