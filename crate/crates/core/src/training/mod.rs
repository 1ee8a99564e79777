//! Joint training of the hybrid model, evaluation and an end-to-end
//! gradient check of the combined loss.

mod adam;
mod loss;

use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_update, AdamState, GradGroup};
pub use loss::{classification_loss, combined_loss, LossMode, LossTerms, StopGrad};

use crate::augment::{build_volume, default_roster, derive_stream, splitmix64, AugSpec, SeedContext};
use crate::autodiff::gradcheck::relative_error;
use crate::autodiff::Tape;
use crate::data::{split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{commit_stats, image_batch, softmax_rows, volume_batch, HybridModel, ParamId, ParamStore, TwoDNet};
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;

const VALIDATION_SALT: u64 = 0x7661_6c69_6461_7465;

/// What gets trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Both networks with the combined loss.
    #[default]
    Hybrid,
    /// The 2D network alone with its classification loss.
    TwoDOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the softmax consistency term.
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub roster: Vec<AugSpec>,
    pub loss_mode: LossMode,
    pub mse_stop_grad: StopGrad,
    /// Halve the learning rate after this many epochs without improvement;
    /// `None` keeps it constant.
    pub lr_plateau_patience: Option<usize>,
    pub arch: Arch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            alpha: 0.5,
            beta: 0.5,
            lr: 1e-4,
            batch_size: 8,
            max_epochs: 30,
            patience: 5,
            val_fraction: 0.1,
            seed: 0,
            roster: default_roster(),
            loss_mode: LossMode::MulticlassCe,
            mse_stop_grad: StopGrad::None,
            lr_plateau_patience: Some(2),
            arch: Arch::Hybrid,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return bad(format!("validation fraction must be in (0, 0.5), got {}", self.val_fraction));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return bad(format!("alpha {} and beta {} must be >= 0 and not both 0", self.alpha, self.beta));
        }
        if self.arch == Arch::Hybrid && self.roster.is_empty() {
            return bad("hybrid training needs a non-empty augmentation roster".into());
        }
        self.roster.iter().try_for_each(AugSpec::validate)
    }
}

/// Mean training losses and validation results of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l2d: f64,
    pub l3d: f64,
    pub mse: f64,
    pub total: f64,
    /// Fraction of training samples the 2D head classified correctly
    /// during the epoch (training-mode forward).
    pub train_acc: f64,
    pub val_acc: f64,
    /// Mean cross-entropy of the 2D head on the validation set.
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights the model holds after [`fit`].
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stopped_epoch: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub steps: u64,
}

impl FitReport {
    pub const CSV_HEADER: &'static str = "epoch,l2d,l3d,mse,total,val_acc";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{},{},{}", e.epoch, e.l2d, e.l3d, e.mse, e.total, e.val_acc);
        }
        out
    }
}

/// The stratified `(fit, validation)` partition [`fit`] carves from its
/// training set.
pub fn validation_split(train: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let spec = SplitSpec {
        train_fraction: 1.0 - cfg.val_fraction,
        stratified: true,
        seed: splitmix64(cfg.seed ^ VALIDATION_SALT),
    };
    split(train, &spec)
}

fn check_dataset(ds: &Dataset, num_classes: usize) -> Result<()> {
    if ds.num_classes() != num_classes {
        return Err(Error::Config(format!("dataset has {} classes, model has {num_classes}", ds.num_classes())));
    }
    match ds.image_dims() {
        None => Err(Error::Data("empty dataset".into())),
        Some((3, _, _)) => Ok(()),
        Some(dims) => Err(Error::Data(format!("expected prepared 3-channel images, got {dims:?}"))),
    }
}

/// Accuracy and mean cross-entropy of the 2D network in eval mode.
fn validate_2d(net: &TwoDNet, ds: &Dataset) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for chunk in ds.samples().chunks(EVAL_BATCH) {
        let logits = net.logits(&image_batch(chunk.iter().map(|s| &s.image))?)?;
        let k = logits.shape()[1];
        for ((row, s), pred) in logits.data().chunks_exact(k).zip(chunk).zip(logits.argmax_rows()?) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[s.label];
            correct += usize::from(pred == s.label);
        }
    }
    Ok((correct as f64 / ds.len() as f64, loss / ds.len() as f64))
}

#[derive(Default)]
struct Sums {
    l2d: f64,
    l3d: f64,
    mse: f64,
    total: f64,
    samples: usize,
    correct: usize,
}

/// Trains `model` on `train` and leaves it holding the weights of the best
/// validation epoch (highest 2D accuracy, ties broken by lower validation
/// loss). Stops once `patience` epochs pass without a higher accuracy.
pub fn fit(model: &mut HybridModel, train: &Dataset, cfg: &TrainConfig) -> Result<FitReport> {
    cfg.validate()?;
    check_dataset(train, model.num_classes())?;
    if train.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Config("training set must contain at least two classes".into()));
    }
    if cfg.loss_mode == LossMode::BinaryCe && model.num_classes() != 2 {
        return Err(Error::Config(format!("binary cross-entropy needs 2 classes, model has {}", model.num_classes())));
    }
    model.set_weights(cfg.alpha, cfg.beta)?;
    let (fit_set, val_set) = validation_split(train, cfg)?;
    info!("fit: {} training samples, {} validation samples", fit_set.len(), val_set.len());

    let mut adam = AdamState::new();
    let mut lr = cfg.lr;
    let mut epochs = Vec::new();
    let mut best: Option<(f64, f64, usize, ParamStore, ParamStore)> = None;
    let (mut since_best, mut since_lr) = (0usize, 0usize);
    let mut stopped_epoch = cfg.max_epochs;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..fit_set.len()).collect();
        order.shuffle(&mut derive_stream(SeedContext::new(cfg.seed, epoch as u64, u64::MAX, 0)));
        let mut sums = Sums::default();
        for batch in order.chunks(cfg.batch_size) {
            // A lone trailing sample would give batch norm a single value per
            // channel in the deepest stage.
            if batch.len() < 2 {
                continue;
            }
            train_step(model, &fit_set, batch, epoch, cfg, lr, &mut adam, &mut sums)?;
        }
        let (val_acc, val_loss) = validate_2d(&model.two_d, &val_set)?;
        let n = sums.samples as f64;
        let record = EpochRecord {
            epoch,
            l2d: sums.l2d / n,
            l3d: sums.l3d / n,
            mse: sums.mse / n,
            total: sums.total / n,
            train_acc: sums.correct as f64 / n,
            val_acc,
            val_loss,
            lr,
        };
        debug!("epoch {epoch}: {record:?}");
        epochs.push(record);

        // Patience counts epochs without a strictly better accuracy; an
        // equal accuracy with lower loss still replaces the kept weights.
        let (improved, better_tie) = match &best {
            None => (true, false),
            Some(b) => (val_acc > b.0, val_acc == b.0 && val_loss < b.1),
        };
        if improved || better_tie {
            best = Some((val_acc, val_loss, epoch, model.two_d.params().clone(), model.three_d.params().clone()));
        }
        if improved {
            since_best = 0;
            since_lr = 0;
        } else {
            since_best += 1;
            since_lr += 1;
            if cfg.lr_plateau_patience.is_some_and(|p| since_lr >= p.max(1)) {
                lr /= 2.0;
                since_lr = 0;
                info!("epoch {epoch}: learning rate halved to {lr}");
            }
        }
        if since_best >= cfg.patience {
            stopped_epoch = epoch;
            break;
        }
    }

    let (best_val_acc, _, best_epoch, two_d, three_d) = best.expect("at least one epoch ran");
    *model.two_d.params_mut() = two_d;
    *model.three_d.params_mut() = three_d;
    Ok(FitReport {
        epochs,
        best_epoch,
        best_val_acc,
        stopped_epoch,
        train_size: fit_set.len(),
        val_size: val_set.len(),
        steps: adam.steps(),
    })
}

/// The pseudo-volume of sample `index` at `epoch` (epoch 0 for evaluation).
pub fn sample_volume(
    ds: &Dataset,
    index: usize,
    roster: &[AugSpec],
    seed: u64,
    epoch: u64,
) -> Result<crate::augment::Volume> {
    build_volume(&ds.samples()[index].image, roster, SeedContext::new(seed, epoch, index as u64, 0))
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut HybridModel,
    ds: &Dataset,
    batch: &[usize],
    epoch: usize,
    cfg: &TrainConfig,
    lr: f64,
    adam: &mut AdamState,
    sums: &mut Sums,
) -> Result<()> {
    let images = image_batch(batch.iter().map(|&i| &ds.samples()[i].image))?;
    let targets: Vec<usize> = batch.iter().map(|&i| ds.samples()[i].label).collect();
    let mut tape = Tape::new();
    let (terms, two_pass, three_pass) = match cfg.arch {
        Arch::Hybrid => {
            let volumes = batch
                .iter()
                .map(|&i| sample_volume(ds, i, &cfg.roster, cfg.seed, epoch as u64))
                .collect::<Result<Vec<_>>>()?;
            let pass = model.forward(&mut tape, &images, &volume_batch(&volumes)?, true)?;
            let terms = combined_loss(
                &mut tape,
                pass.o2d(),
                pass.o3d(),
                &targets,
                cfg.lambda,
                cfg.loss_mode,
                cfg.mse_stop_grad,
            )?;
            (terms, pass.two_d, Some(pass.three_d))
        }
        Arch::TwoDOnly => {
            let x = tape.constant(&images);
            let pass = model.two_d.forward(&mut tape, x, true)?;
            let l = classification_loss(&mut tape, pass.logits, &targets, cfg.loss_mode)?;
            let v = tape.value(l).item()?;
            (LossTerms { total: l, l2d: v, l3d: 0.0, mse: 0.0, total_value: v }, pass, None)
        }
    };
    let preds = tape.value(two_pass.logits).argmax_rows()?;
    let n = batch.len() as f64;
    sums.l2d += terms.l2d * n;
    sums.l3d += terms.l3d * n;
    sums.mse += terms.mse * n;
    sums.total += terms.total_value * n;
    sums.samples += batch.len();
    sums.correct += preds.iter().zip(&targets).filter(|(p, t)| p == t).count();

    let mut grads = tape.backward(terms.total)?;
    let mut collect = |bindings: &[(ParamId, crate::autodiff::Var)]| -> Vec<(ParamId, Vec<f64>)> {
        bindings.iter().filter_map(|&(id, v)| grads.take(v).map(|g| (id, g))).collect()
    };
    let g2 = collect(&two_pass.bindings);
    let g3 = three_pass.as_ref().map(|p| collect(&p.bindings)).unwrap_or_default();
    adam.step(lr, &mut [(model.two_d.params_mut(), g2), (model.three_d.params_mut(), g3)])?;
    commit_stats(model.two_d.params_mut(), &two_pass.stats);
    if let Some(p) = &three_pass {
        commit_stats(model.three_d.params_mut(), &p.stats);
    }
    Ok(())
}

/// A frozen model and the head whose output is scored.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    TwoD(&'a TwoDNet),
    /// Combined logits; sample `i` gets the volume built with
    /// `SeedContext::new(eval_seed, 0, i, 0)`.
    Hybrid {
        model: &'a HybridModel,
        roster: &'a [AugSpec],
        eval_seed: u64,
    },
}

/// Eval-mode predictions and `[N, K]` softmax scores.
pub fn predict(p: Predictor<'_>, ds: &Dataset) -> Result<(Vec<usize>, Vec<f64>)> {
    let k = match p {
        Predictor::TwoD(net) => net.num_classes(),
        Predictor::Hybrid { model, .. } => model.num_classes(),
    };
    check_dataset(ds, k)?;
    let mut preds = Vec::with_capacity(ds.len());
    let mut scores = Vec::with_capacity(ds.len() * k);
    for start in (0..ds.len()).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(ds.len())).collect();
        let images = image_batch(idx.iter().map(|&i| &ds.samples()[i].image))?;
        let logits = match p {
            Predictor::TwoD(net) => net.logits(&images)?,
            Predictor::Hybrid { model, roster, eval_seed } => {
                let vols =
                    idx.iter().map(|&i| sample_volume(ds, i, roster, eval_seed, 0)).collect::<Result<Vec<_>>>()?;
                model.predict(&images, &volume_batch(&vols)?)?.oh
            }
        };
        preds.extend(logits.argmax_rows()?);
        scores.extend_from_slice(softmax_rows(&logits)?.data());
    }
    Ok((preds, scores))
}

pub fn evaluate(p: Predictor<'_>, ds: &Dataset) -> Result<MetricsReport> {
    let (preds, scores) = predict(p, ds)?;
    MetricsReport::compute(&ds.labels(), &preds, &scores, ds.class_names())
}

fn branch_store(m: &mut HybridModel, branch: usize) -> &mut ParamStore {
    if branch == 0 {
        m.two_d.params_mut()
    } else {
        m.three_d.params_mut()
    }
}

/// Outcome of [`gradcheck_combined`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a probe crossed a kink.
    pub rejected: usize,
}

/// Checks the tape gradient of the training-mode combined loss against
/// central differences on `coordinates` trainable scalars drawn at random
/// from both networks.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck_combined(
    model: &HybridModel,
    images: &Tensor,
    volumes: &Tensor,
    targets: &[usize],
    cfg: &TrainConfig,
    coordinates: usize,
    seed: u64,
    eps: f64,
) -> Result<CombinedCheck> {
    let run = |m: &HybridModel| -> Result<(Tape, crate::model::HybridPass, LossTerms)> {
        let mut tape = Tape::with_kink_tracking();
        let pass = m.forward(&mut tape, images, volumes, true)?;
        let terms =
            combined_loss(&mut tape, pass.o2d(), pass.o3d(), targets, cfg.lambda, cfg.loss_mode, cfg.mse_stop_grad)?;
        Ok((tape, pass, terms))
    };
    let (tape, pass, terms) = run(model)?;
    let base = tape.kink_fingerprint();
    let mut grads = tape.backward(terms.total)?;
    // (branch, parameter, analytic gradient)
    let mut analytic: Vec<(usize, ParamId, Vec<f64>)> = Vec::new();
    for (branch, net) in [&pass.two_d, &pass.three_d].into_iter().enumerate() {
        for &(id, v) in &net.bindings {
            let g = grads.take(v).ok_or_else(|| Error::Contract("parameter not reached by the loss".into()))?;
            analytic.push((branch, id, g));
        }
    }
    let total: usize = analytic.iter().map(|a| a.2.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let mut probe = model.clone();
    let mut out = CombinedCheck { max_rel_error: 0.0, checked: 0, rejected: 0 };
    while out.checked < coordinates {
        if out.rejected > 20 * coordinates {
            return Err(Error::KinkCrossed);
        }
        let mut flat = rng.random_range(0..total);
        let (branch, id, g) = analytic
            .iter()
            .find(|a| {
                if flat < a.2.len() {
                    true
                } else {
                    flat -= a.2.len();
                    false
                }
            })
            .expect("index within total");
        let orig = branch_store(&mut probe, *branch).value(*id).data()[flat];
        let mut eval = |delta: f64| -> Result<(f64, u64)> {
            branch_store(&mut probe, *branch).value_mut(*id).data_mut()[flat] = orig + delta;
            let (tape, _, terms) = run(&probe)?;
            Ok((terms.total_value, tape.kink_fingerprint()))
        };
        let (plus, fp_plus) = eval(eps)?;
        let (minus, fp_minus) = eval(-eps)?;
        branch_store(&mut probe, *branch).value_mut(*id).data_mut()[flat] = orig;
        if fp_plus != base || fp_minus != base {
            out.rejected += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        out.max_rel_error = out.max_rel_error.max(relative_error(g[flat], numeric));
        out.checked += 1;
    }
    Ok(out)
}
