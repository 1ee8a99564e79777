//! Labelled image datasets: loading, preparation, splitting and balancing.

pub mod pnm;
mod synthetic;
mod transform;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use transform::{replicate_channels, resize_bilinear};

use crate::augment::{derive_stream, splitmix64, AugSpec, SeedContext};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

/// An ordered collection of labelled images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    provenance: String,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, provenance: impl Into<String>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::Index { index: s.label, bound: class_names.len() });
        }
        Ok(Self { samples, class_names, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// The shared `(channels, height, width)` of all images, if uniform.
    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        let first = self.samples.first()?.image.dims();
        self.samples.iter().all(|s| s.image.dims() == first).then_some(first)
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], note: &str) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            provenance: format!("{}/{note}", self.provenance),
        }
    }

    /// Resizes every image to `size x size` and replicates grayscale to three
    /// channels, the input format both networks expect.
    pub fn prepare(&self, size: usize) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let img = if s.image.height() == size && s.image.width() == size {
                    s.image.clone()
                } else {
                    resize_bilinear(&s.image, size, size)?
                };
                Ok(Sample { image: replicate_channels(&img), label: s.label })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples, class_names: self.class_names.clone(), provenance: self.provenance.clone() })
    }
}

/// Result of reading a class-per-directory tree.
#[derive(Debug)]
pub struct LoadedDir {
    pub dataset: Dataset,
    /// Files that could not be decoded, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<image>` with classes ordered by directory name.
/// Undecodable files are skipped with a warning; a class with no decodable
/// image is an error.
pub fn load_image_dir(root: &Path) -> Result<LoadedDir> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!(
            "{} has {} class directories, need at least 2",
            root.display(),
            class_dirs.len()
        )));
    }
    let mut samples = Vec::new();
    let mut names = Vec::new();
    let mut skipped = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let before = samples.len();
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            match pnm::read(&file) {
                Ok(image) => samples.push(Sample { image, label }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    skipped.push((file, e.to_string()));
                }
            }
        }
        if samples.len() == before {
            return Err(Error::Data(format!("class directory {} has no decodable images", dir.display())));
        }
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    let dataset = Dataset::new(samples, names, root.display().to_string())?;
    Ok(LoadedDir { dataset, skipped })
}

/// How a dataset is divided into train and test parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_true")]
    pub stratified: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_train_fraction() -> f64 {
    0.7
}

fn default_true() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: default_train_fraction(), stratified: true, seed: 0 }
    }
}

/// Train size for a group of `n`: `round(fraction * n)`, kept within
/// `[1, n - 1]` so both sides are non-empty.
fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n - 1)
}

/// Index partition `(train, test)`, each sorted ascending.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Parameter(format!("train fraction {} outside (0, 1)", spec.train_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed));
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut g = vec![Vec::new(); ds.num_classes()];
        for (i, s) in ds.samples.iter().enumerate() {
            g[s.label].push(i);
        }
        g.retain(|v| !v.is_empty());
        g
    } else {
        vec![(0..ds.len()).collect()]
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut group in groups {
        if group.len() < 2 {
            let label = ds.samples[group[0]].label;
            return Err(Error::Data(format!(
                "class {:?} has a single sample and cannot be split",
                ds.class_names[label]
            )));
        }
        group.shuffle(&mut rng);
        let k = train_count(group.len(), spec.train_fraction);
        train.extend_from_slice(&group[..k]);
        test.extend_from_slice(&group[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Splits into `(train, test)` datasets, preserving original sample order.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(ds, spec)?;
    Ok((ds.subset(&train, "train"), ds.subset(&test, "test")))
}

/// Per-class targets that raise every class to the largest class count.
pub fn balanced_targets(ds: &Dataset) -> Vec<usize> {
    let counts = ds.class_counts();
    let max = counts.iter().copied().max().unwrap_or(0);
    vec![max; counts.len()]
}

const MAX_DUPLICATE_ATTEMPTS: u64 = 16;

/// Raises each class to `target_counts[class]` with augmented duplicates of
/// randomly chosen members. Each duplicate gets one augmentation drawn from
/// `roster`, redrawn until the copy differs from its source.
pub fn oversample_minority(train: &Dataset, target_counts: &[usize], roster: &[AugSpec], seed: u64) -> Result<Dataset> {
    let counts = train.class_counts();
    if target_counts.len() != counts.len() {
        return Err(Error::Parameter(format!(
            "{} oversampling targets for {} classes",
            target_counts.len(),
            counts.len()
        )));
    }
    if let Some(k) = (0..counts.len()).find(|&k| target_counts[k] < counts[k]) {
        return Err(Error::Parameter(format!(
            "target {} for class {:?} is below its current count {}",
            target_counts[k], train.class_names[k], counts[k]
        )));
    }
    let needs_copies = (0..counts.len()).any(|k| target_counts[k] > counts[k]);
    if !needs_copies {
        return Ok(train.clone());
    }
    if roster.is_empty() {
        return Err(Error::Parameter("oversampling needs a non-empty augmentation roster".into()));
    }
    if let Some(k) = (0..counts.len()).find(|&k| counts[k] == 0 && target_counts[k] > 0) {
        return Err(Error::Data(format!("class {:?} has no samples to duplicate", train.class_names[k])));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6f76_6572));
    let mut samples = train.samples.clone();
    let mut copy_index = 0u64;
    for k in 0..counts.len() {
        let members: Vec<usize> = (0..train.len()).filter(|&i| train.samples[i].label == k).collect();
        for _ in counts[k]..target_counts[k] {
            let src = &train.samples[members[rng.random_range(0..members.len())]].image;
            let mut image = None;
            for attempt in 0..MAX_DUPLICATE_ATTEMPTS {
                let spec = roster[rng.random_range(0..roster.len())];
                spec.validate()?;
                let ctx = SeedContext::new(seed, u64::MAX, copy_index, attempt);
                let candidate = spec.apply(src, &mut derive_stream(ctx));
                if &candidate != src {
                    image = Some(candidate);
                    break;
                }
            }
            let image = image.ok_or_else(|| {
                Error::Parameter("augmentation roster leaves samples unchanged; cannot oversample".into())
            })?;
            samples.push(Sample { image, label: k });
            copy_index += 1;
        }
    }
    Ok(Dataset {
        samples,
        class_names: train.class_names.clone(),
        provenance: format!("{}/oversampled", train.provenance),
    })
}
