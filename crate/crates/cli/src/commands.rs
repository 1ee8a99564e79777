//! Subcommand bodies. Each one loads and checks its inputs first, then
//! claims the output directory and echoes the resolved config, then works.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use alzhinet_core::augment::{build_volume, splitmix64, SeedContext};
use alzhinet_core::autodiff::gradcheck::check_primitives;
use alzhinet_core::data::{
    self, balanced_targets, generate_synthetic, load_image_dir, oversample_minority, pnm, Dataset,
};
use alzhinet_core::model::{checkpoint, image_batch, volume_batch, HybridModel, ThreeDNet, TwoDNet};
use alzhinet_core::robustness::{sweep, NamedModel};
use alzhinet_core::training::{evaluate, fit, gradcheck_combined, sample_volume, validation_split, Predictor};
use log::{info, warn};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::fail::{self, Fail};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const LOCK_FILE: &str = ".alzhinet.lock";
const TWO_D_INIT_LANE: u64 = 0x32;
const THREE_D_INIT_LANE: u64 = 0x33;
const GRADCHECK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Head {
    #[value(name = "2d")]
    TwoD,
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    Test,
}

/// Exclusive claim on an output directory, released on drop.
pub struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Creates the output directory, takes the lock and writes the effective
/// config with the tool version.
fn claim_output(cfg: &RunConfig, command: &str) -> Result<Lock, Fail> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Fail::data(format!("cannot create {}: {e}", out.display())))?;
    let path = out.join(LOCK_FILE);
    OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            Fail::data(format!("{} is in use by another run (remove {} if stale)", out.display(), path.display()))
        } else {
            Fail::data(format!("cannot lock {}: {e}", out.display()))
        }
    })?;
    let lock = Lock(path);
    let echo = json!({ "tool": "alzhinet", "version": VERSION, "command": command, "config": cfg });
    write_json(out, "effective_config.json", &echo)?;
    Ok(lock)
}

fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Fail> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Fail::data(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), Fail> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Fail::new(1, e.to_string()))?;
    text.push('\n');
    write_file(dir, name, text)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, Fail> {
    let raw = match (&cfg.data.dir, &cfg.data.synthetic) {
        (Some(dir), _) => {
            let loaded = load_image_dir(dir)?;
            if !loaded.skipped.is_empty() {
                warn!("{} undecodable files skipped under {}", loaded.skipped.len(), dir.display());
            }
            loaded.dataset
        }
        (None, Some(spec)) => generate_synthetic(spec)?,
        (None, None) => return Err(Fail::config("at `data`: no data source")),
    };
    Ok(raw.prepare(cfg.data.image_size)?)
}

/// `(train, test)`; the training part is oversampled when configured.
fn train_test(cfg: &RunConfig) -> Result<(Dataset, Dataset), Fail> {
    let ds = load_dataset(cfg)?;
    let (train, test) = data::split(&ds, &cfg.data.split)?;
    if !cfg.data.oversample {
        return Ok((train, test));
    }
    let targets = balanced_targets(&train);
    let train = oversample_minority(&train, &targets, &cfg.train.roster, cfg.seed())?;
    Ok((train, test))
}

fn pick_split(cfg: &RunConfig, which: SplitChoice) -> Result<Dataset, Fail> {
    let (train, test) = train_test(cfg)?;
    Ok(match which {
        SplitChoice::Train => train,
        SplitChoice::Test => test,
        SplitChoice::Val => validation_split(&train, &cfg.train)?.1,
    })
}

/// Fresh, seeded model for `classes` classes.
fn build_model(cfg: &RunConfig, classes: usize) -> Result<HybridModel, Fail> {
    let seed = cfg.seed();
    let two_d = TwoDNet::new(cfg.model.two_d(classes), splitmix64(seed ^ TWO_D_INIT_LANE))?;
    let three_d = ThreeDNet::new(cfg.model.three_d(classes), splitmix64(seed ^ THREE_D_INIT_LANE))?;
    Ok(HybridModel::new(two_d, three_d, cfg.train.alpha, cfg.train.beta)?)
}

/// Loads a 2D-only or a hybrid checkpoint into `model`; returns whether it
/// held both networks.
fn load_checkpoint(path: &Path, model: &mut HybridModel) -> Result<bool, Fail> {
    let bytes = fs::read(path)
        .map_err(|e| Fail::new(fail::CHECKPOINT, format!("cannot read checkpoint {}: {e}", path.display())))?;
    let entries = checkpoint::decode(&bytes).map_err(|e| Fail::checkpoint(path, e))?;
    let hybrid = entries.len() > model.two_d.params().len();
    let res = if hybrid {
        checkpoint::assign(entries, &mut [model.two_d.params_mut(), model.three_d.params_mut()])
    } else {
        checkpoint::assign(entries, &mut [model.two_d.params_mut()])
    };
    res.map_err(|e| Fail::checkpoint(path, e))?;
    Ok(hybrid)
}

fn predictor<'a>(
    model: &'a HybridModel,
    hybrid_weights: bool,
    head: Head,
    cfg: &'a RunConfig,
    path: &Path,
) -> Result<Predictor<'a>, Fail> {
    match head {
        Head::TwoD => Ok(Predictor::TwoD(&model.two_d)),
        Head::Hybrid if hybrid_weights => {
            Ok(Predictor::Hybrid { model, roster: &cfg.train.roster, eval_seed: cfg.seed() })
        }
        Head::Hybrid => Err(Fail::new(
            fail::CHECKPOINT,
            format!("checkpoint {} holds only the 2D network; --head hybrid needs a hybrid checkpoint", path.display()),
        )),
    }
}

pub fn train(cfg: &RunConfig, save_hybrid: bool) -> Result<(), Fail> {
    let (train, _) = train_test(cfg)?;
    let _lock = claim_output(cfg, "train")?;
    let out = &cfg.output_dir;
    let mut model = build_model(cfg, train.num_classes())?;
    info!("training on {} samples, {} trainable parameters", train.len(), model.num_trainable());
    let report = fit(&mut model, &train, &cfg.train)?;
    write_json(out, "fit_report.json", &report)?;
    write_file(out, "fit_report.csv", report.to_csv())?;
    model.two_d.save_weights(&out.join("model.azwt"))?;
    if save_hybrid {
        model.save_weights(&out.join("hybrid.azwt"))?;
    }
    println!(
        "best epoch {} of {}: validation accuracy {:.4}",
        report.best_epoch,
        report.epochs.len(),
        report.best_val_acc
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, head: Head, split: SplitChoice) -> Result<(), Fail> {
    let ds = pick_split(cfg, split)?;
    let mut model = build_model(cfg, ds.num_classes())?;
    let hybrid = load_checkpoint(checkpoint, &mut model)?;
    let p = predictor(&model, hybrid, head, cfg, checkpoint)?;
    let _lock = claim_output(cfg, "eval")?;
    let out = &cfg.output_dir;
    let report = evaluate(p, &ds)?;
    let name = stem(checkpoint);
    write_json(out, "metrics.json", &report)?;
    write_file(out, "metrics.csv", report.to_csv(&name))?;
    write_file(out, "confusion.csv", report.confusion_csv())?;
    println!("{name}: accuracy {:.4} on {} samples", report.accuracy, report.samples);
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn perturb(cfg: &RunConfig, checkpoints: &[PathBuf], head: Head, split: SplitChoice) -> Result<(), Fail> {
    if checkpoints.is_empty() {
        return Err(Fail::config("perturb needs at least one --checkpoint"));
    }
    let test = pick_split(cfg, split)?;
    let mut models = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for path in checkpoints {
        let mut model = build_model(cfg, test.num_classes())?;
        let hybrid = load_checkpoint(path, &mut model)?;
        predictor(&model, hybrid, head, cfg, path)?;
        let mut name = stem(path);
        if names.contains(&name) {
            name = format!("{name}_{}", names.len());
        }
        names.push(name);
        models.push((model, hybrid, path));
    }
    let named = models
        .iter()
        .zip(&names)
        .map(|((m, hybrid, path), name)| Ok(NamedModel { name, predictor: predictor(m, *hybrid, head, cfg, path)? }))
        .collect::<Result<Vec<_>, Fail>>()?;
    let _lock = claim_output(cfg, "perturb")?;
    let out = &cfg.output_dir;
    let report = sweep(&named, &test, &cfg.grids(), cfg.seed())?;
    write_file(out, "sweep.csv", report.to_csv())?;
    write_json(out, "sweep.json", &report)?;
    write_json(out, "trends.json", &report.trends)?;
    println!("{} sweep rows for {} model(s)", report.rows.len(), named.len());
    Ok(())
}

pub fn augment_preview(cfg: &RunConfig, image: &Path) -> Result<(), Fail> {
    let img = pnm::read(image).map_err(|e| Fail::data(format!("cannot decode {}: {e}", image.display())))?;
    let _lock = claim_output(cfg, "augment-preview")?;
    let volume = build_volume(&img, &cfg.train.roster, SeedContext::new(cfg.seed(), 0, 0, 0))?;
    for (d, slice) in volume.slices().iter().enumerate() {
        let path = cfg.output_dir.join(format!("slice_{d:02}.{}", pnm::extension(slice)));
        pnm::write(&path, slice)?;
    }
    println!("{} slices written to {}", volume.depth(), cfg.output_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct CheckLine {
    name: String,
    max_rel_error: f64,
    threshold: f64,
    passed: bool,
}

pub struct GradcheckOptions {
    pub threshold: f64,
    pub combined_threshold: f64,
    pub trials: u64,
    pub coordinates: usize,
}

pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<(), Fail> {
    let _lock = claim_output(cfg, "gradcheck")?;
    let seed = cfg.seed();
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut order = Vec::new();
    for trial in 0..opts.trials {
        for c in check_primitives(splitmix64(seed) ^ trial, GRADCHECK_EPS)? {
            let e = worst.entry(c.name).or_insert_with(|| {
                order.push(c.name);
                0.0
            });
            *e = e.max(c.max_rel_error);
        }
    }
    let mut lines: Vec<CheckLine> = order
        .iter()
        .map(|&name| CheckLine {
            name: name.to_string(),
            max_rel_error: worst[name],
            threshold: opts.threshold,
            passed: worst[name] < opts.threshold,
        })
        .collect();

    // End to end: the combined loss over the configured hybrid model on one
    // sample per class.
    let classes = cfg.data.synthetic.as_ref().map_or(4, |s| s.num_classes());
    let spec = data::SyntheticSpec::balanced(classes, 1, cfg.data.image_size, seed);
    let ds = generate_synthetic(&spec)?.prepare(cfg.data.image_size)?;
    let images = image_batch(ds.samples().iter().map(|s| &s.image))?;
    let vols =
        (0..ds.len()).map(|i| sample_volume(&ds, i, &cfg.train.roster, seed, 0)).collect::<Result<Vec<_>, _>>()?;
    let model = build_model(cfg, classes)?;
    let combined = gradcheck_combined(
        &model,
        &images,
        &volume_batch(&vols)?,
        &ds.labels(),
        &cfg.train,
        opts.coordinates,
        seed,
        GRADCHECK_EPS,
    )?;
    lines.push(CheckLine {
        name: "combined_loss".into(),
        max_rel_error: combined.max_rel_error,
        threshold: opts.combined_threshold,
        passed: combined.max_rel_error < opts.combined_threshold,
    });

    for l in &lines {
        println!("{:<32} {:.3e}  {}", l.name, l.max_rel_error, if l.passed { "ok" } else { "FAIL" });
    }
    write_json(
        &cfg.output_dir,
        "gradcheck.json",
        &json!({ "trials": opts.trials, "coordinates": combined.checked, "rejected": combined.rejected, "checks": lines }),
    )?;
    let failing: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Fail::new(fail::VERIFICATION, format!("gradient check failed: {}", failing.join(", "))))
    }
}

pub fn synth(cfg: &RunConfig) -> Result<(), Fail> {
    if cfg.data.dir.is_some() {
        return Err(Fail::config("at `data.dir`: synth needs a synthetic data source"));
    }
    let spec = cfg.data.synthetic.as_ref().ok_or_else(|| Fail::config("at `data.synthetic`: missing"))?;
    let ds = generate_synthetic(spec)?;
    let _lock = claim_output(cfg, "synth")?;
    let root = cfg.output_dir.join("dataset");
    let mut counters = vec![0usize; ds.num_classes()];
    for name in ds.class_names() {
        fs::create_dir_all(root.join(name))?;
    }
    for s in ds.samples() {
        let name = &ds.class_names()[s.label];
        let file = root.join(name).join(format!("{:04}.{}", counters[s.label], pnm::extension(&s.image)));
        counters[s.label] += 1;
        pnm::write(&file, &s.image)?;
    }
    println!("{} images in {} classes written to {}", ds.len(), ds.num_classes(), root.display());
    Ok(())
}
