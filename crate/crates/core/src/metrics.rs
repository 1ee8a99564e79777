//! Confusion matrices, macro-averaged one-vs-rest metrics and ROC AUC.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K x K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Self { k, counts: rows.concat() })
    }

    pub fn from_labels(truth: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Dimension(format!("{} true labels but {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::new(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            if let Some(&bad) = [t, p].iter().find(|&&l| l >= k) {
                return Err(Error::Index { index: bad, bound: k });
            }
            cm.counts[t * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.k..(truth + 1) * self.k]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// One-vs-rest `(tp, fp, fn, tn)` for class `c`.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = self.row(c).iter().sum();
        let col: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
        let (fp, fn_) = (col - tp, row - tp);
        (tp, fp, fn_, self.total() - tp - fp - fn_)
    }
}

/// Ratio with the zero-denominator convention: `0` plus a flag.
fn ratio(num: u64, den: u64, flag: &'static str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(flag.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: u64,
    /// One-vs-rest accuracy `(tp + tn) / total`.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub auc: Option<f64>,
    /// Metrics whose denominator was zero (reported as 0).
    pub flags: Vec<String>,
}

/// Accuracy plus per-class and macro precision, recall, F1 and specificity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub per_class: Vec<ClassMetrics>,
}

pub fn scalar_metrics(cm: &ConfusionMatrix) -> Result<ScalarMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Undefined("metrics of an empty confusion matrix".into()));
    }
    let k = cm.num_classes();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let (tp, fp, fn_, tn) = cm.one_vs_rest(c);
        let mut flags = Vec::new();
        let precision = ratio(tp, tp + fp, "precision_undefined", &mut flags);
        let recall = ratio(tp, tp + fn_, "recall_undefined", &mut flags);
        let specificity = ratio(tn, tn + fp, "specificity_undefined", &mut flags);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            flags.push("f1_undefined".into());
            0.0
        };
        per_class.push(ClassMetrics {
            class: c.to_string(),
            support: tp + fn_,
            accuracy: (tp + tn) as f64 / total as f64,
            precision,
            recall,
            f1,
            specificity,
            auc: None,
            flags,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(ScalarMetrics {
        accuracy: cm.trace() as f64 / total as f64,
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
        specificity: mean(|m| m.specificity),
        per_class,
    })
}

/// Area under the ROC curve of `scores` for binary `positive` labels, by a
/// threshold sweep over unique scores with trapezoidal integration (tied
/// scores contribute half credit). `None` without both classes present.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Some(area / (p as f64 * n as f64))
}

/// Per-class one-vs-rest AUC and their macro mean over defined classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Macro one-vs-rest AUC from `[N, K]` row-major class scores.
pub fn roc_auc(scores: &[f64], labels: &[usize], k: usize) -> Result<AucReport> {
    if k == 0 || scores.len() != labels.len() * k {
        return Err(Error::Dimension(format!("{} scores for {} samples of {k} classes", scores.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index { index: bad, bound: k });
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let col: Vec<f64> = scores.chunks_exact(k).map(|row| row[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            binary_auc(&col, &pos)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("AUC needs samples from at least two classes".into()));
    }
    Ok(AucReport { macro_auc: defined.iter().sum::<f64>() / defined.len() as f64, per_class })
}

/// Everything reported for one evaluated model on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Always `"macro"`: multi-class metrics are unweighted class means.
    pub averaging: String,
    pub samples: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    /// Macro one-vs-rest AUC over classes with both positives and negatives.
    pub auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
    pub class_names: Vec<String>,
}

impl MetricsReport {
    /// Builds the report from labels, hard predictions and `[N, K]` scores.
    pub fn compute(labels: &[usize], predicted: &[usize], scores: &[f64], class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        let cm = ConfusionMatrix::from_labels(labels, predicted, k)?;
        let mut m = scalar_metrics(&cm)?;
        let auc = match roc_auc(scores, labels, k) {
            Ok(a) => {
                for (c, v) in m.per_class.iter_mut().zip(&a.per_class) {
                    c.auc = *v;
                    if v.is_none() {
                        c.flags.push("auc_undefined".into());
                    }
                }
                Some(a.macro_auc)
            }
            Err(Error::Undefined(_)) => {
                m.per_class.iter_mut().for_each(|c| c.flags.push("auc_undefined".into()));
                None
            }
            Err(e) => return Err(e),
        };
        for (c, name) in m.per_class.iter_mut().zip(class_names) {
            c.class = name.clone();
        }
        Ok(Self {
            averaging: "macro".into(),
            samples: cm.total(),
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            specificity: m.specificity,
            auc,
            per_class: m.per_class,
            confusion: cm,
            class_names: class_names.to_vec(),
        })
    }

    pub const CSV_HEADER: &'static str = "experiment,class,support,accuracy,precision,recall,f1,specificity,auc";

    /// One row per class plus a `macro` row, without header.
    pub fn csv_rows(&self, experiment: &str) -> String {
        let auc = |a: Option<f64>| a.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut out = String::new();
        for c in &self.per_class {
            let _ = writeln!(
                out,
                "{experiment},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                c.class,
                c.support,
                c.accuracy,
                c.precision,
                c.recall,
                c.f1,
                c.specificity,
                auc(c.auc)
            );
        }
        let _ = writeln!(
            out,
            "{experiment},macro,{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.samples,
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.specificity,
            auc(self.auc)
        );
        out
    }

    pub fn to_csv(&self, experiment: &str) -> String {
        format!("{}\n{}", Self::CSV_HEADER, self.csv_rows(experiment))
    }

    /// Confusion matrix with class names on both axes.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for n in &self.class_names {
            let _ = write!(out, ",{n}");
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(self.confusion.rows()) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}
