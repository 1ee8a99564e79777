//! Test-time corruption sweeps over frozen models.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{derive_stream, kernels, SeedContext};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::MetricsReport;
use crate::training::{evaluate, Predictor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussianNoise,
    Brightness,
    Contrast,
    SaltPepper,
    ColorJitter,
    Occlusion,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::GaussianNoise,
        Family::Brightness,
        Family::Contrast,
        Family::SaltPepper,
        Family::ColorJitter,
        Family::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianNoise => "gaussian_noise",
            Family::Brightness => "brightness",
            Family::Contrast => "contrast",
            Family::SaltPepper => "salt_pepper",
            Family::ColorJitter => "color_jitter",
            Family::Occlusion => "occlusion",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown perturbation family {name:?}")))
    }

    /// Inclusive range of valid intensities.
    pub fn range(self) -> (f64, f64) {
        match self {
            Family::GaussianNoise => (0.0, f64::MAX),
            Family::Brightness => (-1.0, 1.0),
            _ => (0.0, 1.0),
        }
    }

    /// Stream tag separating the per-sample seeds of different families.
    fn tag(self) -> u64 {
        Self::ALL.iter().position(|&f| f == self).expect("listed") as u64 + 1
    }

    /// Corrupts one image. Level 0 leaves every family's input unchanged.
    pub fn apply(self, img: &Image, level: f64, ctx: SeedContext) -> Image {
        let mut rng = derive_stream(ctx);
        match self {
            Family::GaussianNoise => kernels::gaussian_noise(img, level, &mut rng),
            Family::Brightness => kernels::brightness(img, level),
            Family::Contrast => kernels::contrast(img, level),
            Family::SaltPepper => kernels::salt_pepper(img, level, &mut rng),
            Family::ColorJitter => kernels::color_jitter(img, level, &mut rng),
            Family::Occlusion if level == 0.0 => img.clone(),
            Family::Occlusion => kernels::occlude(img, level, &mut rng),
        }
    }
}

/// One corruption family at increasing intensities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationGrid {
    pub family: Family,
    pub levels: Vec<f64>,
}

impl PerturbationGrid {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.family.range();
        if self.levels.is_empty() {
            return Err(Error::Config(format!("{} grid has no levels", self.family.name())));
        }
        if let Some(l) = self.levels.iter().find(|l| !(**l >= lo && **l <= hi)) {
            return Err(Error::Config(format!("{} level {l} outside [{lo}, {hi}]", self.family.name())));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("{} levels must be strictly increasing", self.family.name())));
        }
        Ok(())
    }
}

/// The six standard grids.
pub fn default_grids() -> Vec<PerturbationGrid> {
    let grid = |family, levels: &[f64]| PerturbationGrid { family, levels: levels.to_vec() };
    vec![
        grid(Family::GaussianNoise, &[0.03, 0.06, 0.09, 0.12, 0.15]),
        grid(Family::Brightness, &[0.5, 0.6, 0.7, 0.8, 0.9, 1.0]),
        grid(Family::Contrast, &[0.5, 0.6, 0.7, 0.8, 0.9, 1.0]),
        grid(Family::SaltPepper, &[0.01, 0.015, 0.02, 0.025]),
        grid(Family::ColorJitter, &[0.1, 0.2, 0.3, 0.4, 0.5]),
        grid(Family::Occlusion, &[0.04, 0.06, 0.08, 0.10, 0.12]),
    ]
}

/// The test set with every image corrupted at one grid point. Sample `i`
/// uses `SeedContext::new(seed, family tag, i, level bits)`.
pub fn perturb_dataset(ds: &Dataset, family: Family, level: f64, seed: u64) -> Dataset {
    let samples = ds
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| Sample {
            image: family.apply(&s.image, level, SeedContext::new(seed, family.tag(), i as u64, level.to_bits())),
            label: s.label,
        })
        .collect();
    let note = format!("{} under {} @ {level}", ds.provenance(), family.name());
    Dataset::new(samples, ds.class_names().to_vec(), note).expect("labels unchanged")
}

/// A frozen model under a display name.
#[derive(Clone, Copy, Debug)]
pub struct NamedModel<'a> {
    pub name: &'a str,
    pub predictor: Predictor<'a>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Family name, or `"clean"` for the unperturbed baseline.
    pub family: String,
    /// `None` on the clean row.
    pub level: Option<f64>,
    pub model: String,
    pub report: MetricsReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Never increases and decreases at least once.
    Monotone,
    Flat,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelTrend {
    pub family: String,
    pub model: String,
    pub accuracies: Vec<f64>,
    pub verdict: Verdict,
    /// Number of leading levels over which accuracy never increases.
    pub decreasing_prefix: usize,
    /// Largest accuracy gain between consecutive levels (0 if none).
    pub max_rise: f64,
}

/// Sign of `accuracy(a) - accuracy(b)` at each level of one family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTrend {
    pub family: String,
    pub model_a: String,
    pub model_b: String,
    pub signs: Vec<i8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    pub models: Vec<ModelTrend>,
    pub pairs: Vec<PairTrend>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    /// Clean rows first, then grid points in grid order; within a point,
    /// models in the order given.
    pub rows: Vec<SweepRow>,
    pub trends: TrendSummary,
}

/// Evaluates every model on the clean test set and on each grid point.
/// All models see the same corrupted images.
pub fn sweep(models: &[NamedModel<'_>], test: &Dataset, grids: &[PerturbationGrid], seed: u64) -> Result<SweepReport> {
    if test.is_empty() {
        return Err(Error::Data("sweep needs a non-empty test set".into()));
    }
    if models.is_empty() {
        return Err(Error::Config("sweep needs at least one model".into()));
    }
    grids.iter().try_for_each(PerturbationGrid::validate)?;
    let row = |family: &str, level: Option<f64>, m: &NamedModel<'_>, ds: &Dataset| -> Result<SweepRow> {
        Ok(SweepRow {
            family: family.to_string(),
            level,
            model: m.name.to_string(),
            report: evaluate(m.predictor, ds)?,
        })
    };
    let mut rows = models.iter().map(|m| row("clean", None, m, test)).collect::<Result<Vec<_>>>()?;
    let points: Vec<(Family, f64)> = grids.iter().flat_map(|g| g.levels.iter().map(move |&l| (g.family, l))).collect();
    let per_point: Vec<Result<Vec<SweepRow>>> = points
        .par_iter()
        .map(|&(family, level)| {
            let ds = perturb_dataset(test, family, level, seed);
            models.iter().map(|m| row(family.name(), Some(level), m, &ds)).collect()
        })
        .collect();
    for r in per_point {
        rows.extend(r?);
    }
    let trends = trend_summary(&rows);
    Ok(SweepReport { seed, rows, trends })
}

fn verdict(acc: &[f64]) -> Verdict {
    if acc.windows(2).all(|w| w[1] == w[0]) {
        Verdict::Flat
    } else if acc.windows(2).all(|w| w[1] <= w[0]) {
        Verdict::Monotone
    } else {
        Verdict::Mixed
    }
}

/// Per-family accuracy trends of each model and per-level comparisons of
/// every model pair, over the perturbed rows of `rows`.
pub fn trend_summary(rows: &[SweepRow]) -> TrendSummary {
    let mut families: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in rows.iter().filter(|r| r.level.is_some()) {
        if !families.contains(&r.family.as_str()) {
            families.push(&r.family);
        }
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let series = |family: &str, model: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.level.is_some() && r.family == family && r.model == model)
            .map(|r| r.report.accuracy)
            .collect()
    };
    let mut out = TrendSummary { models: Vec::new(), pairs: Vec::new() };
    for &family in &families {
        for &model in &models {
            let acc = series(family, model);
            let prefix = 1 + acc.windows(2).take_while(|w| w[1] <= w[0]).count();
            let max_rise = acc.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
            out.models.push(ModelTrend {
                family: family.to_string(),
                model: model.to_string(),
                verdict: verdict(&acc),
                decreasing_prefix: prefix.min(acc.len()),
                max_rise,
                accuracies: acc,
            });
        }
        for (i, &a) in models.iter().enumerate() {
            for &b in &models[i + 1..] {
                let signs = series(family, a)
                    .iter()
                    .zip(series(family, b))
                    .map(|(x, y)| (x - y).partial_cmp(&0.0).map_or(0, |o| o as i8))
                    .collect();
                out.pairs.push(PairTrend {
                    family: family.to_string(),
                    model_a: a.to_string(),
                    model_b: b.to_string(),
                    signs,
                });
            }
        }
    }
    out
}

impl SweepReport {
    pub const CSV_HEADER: &'static str = "family,level,model,accuracy,precision,recall,f1,specificity,auc";

    /// One row per (grid point, model); metrics in percent, 2 decimals.
    pub fn to_csv(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let m = &r.report;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.family,
                r.level.map_or_else(|| "none".to_string(), |l| l.to_string()),
                r.model,
                pct(m.accuracy),
                pct(m.precision),
                pct(m.recall),
                pct(m.f1),
                pct(m.specificity),
                m.auc.map(pct).unwrap_or_default()
            );
        }
        out
    }
}
