use alzhinet_core::augment::roster_prefix;
use alzhinet_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use alzhinet_core::metrics::MetricsReport;
use alzhinet_core::model::*;
use alzhinet_core::robustness::*;
use alzhinet_core::training::{evaluate, Predictor};

fn fixture() -> Dataset {
    generate_synthetic(&SyntheticSpec::balanced(4, 6, 16, 21)).unwrap().prepare(16).unwrap()
}

fn nets() -> (TwoDNet, HybridModel) {
    let a = TwoDNet::new(TwoDNetConfig::new(4, 0.125), 1).unwrap();
    let b = TwoDNet::new(TwoDNetConfig::new(4, 0.125), 2).unwrap();
    let three = ThreeDNet::new(ThreeDNetConfig::new(4, 0.125), 2).unwrap();
    (a, HybridModel::new(b, three, 0.5, 0.5).unwrap())
}

#[test]
fn default_grids_are_the_standard_six() {
    let g = default_grids();
    assert_eq!(g.len(), 6);
    assert_eq!(g[0].family, Family::GaussianNoise);
    assert_eq!(g[0].levels, vec![0.03, 0.06, 0.09, 0.12, 0.15]);
    assert_eq!(g[1].levels, vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0]);
    assert_eq!(g[3].levels, vec![0.01, 0.015, 0.02, 0.025]);
    let occ = g.iter().find(|g| g.family == Family::Occlusion).unwrap();
    assert_eq!(occ.levels, vec![0.04, 0.06, 0.08, 0.10, 0.12]);
    assert!(g.iter().all(|g| g.validate().is_ok()));
    let names: Vec<&str> = g.iter().map(|g| g.family.name()).collect();
    assert_eq!(names, ["gaussian_noise", "brightness", "contrast", "salt_pepper", "color_jitter", "occlusion"]);
    assert_eq!(Family::parse("contrast").unwrap(), Family::Contrast);
    assert!(Family::parse("blur").is_err());
}

#[test]
fn invalid_grids_are_rejected() {
    let bad = [
        PerturbationGrid { family: Family::Contrast, levels: vec![0.5, 1.2] },
        PerturbationGrid { family: Family::Occlusion, levels: vec![0.1, 0.1] },
        PerturbationGrid { family: Family::GaussianNoise, levels: vec![] },
        PerturbationGrid { family: Family::SaltPepper, levels: vec![f64::NAN] },
    ];
    for g in bad {
        assert!(g.validate().is_err(), "{g:?}");
    }
}

#[test]
fn level_zero_is_the_identity() {
    let ds = fixture();
    for f in Family::ALL {
        assert_eq!(perturb_dataset(&ds, f, 0.0, 5).samples(), ds.samples(), "{}", f.name());
    }
}

#[test]
fn clean_rows_equal_evaluate_and_sweeps_are_deterministic() {
    let ds = fixture();
    let (a, h) = nets();
    let roster = roster_prefix(3).unwrap();
    let models = [
        NamedModel { name: "2d", predictor: Predictor::TwoD(&a) },
        NamedModel { name: "hybrid", predictor: Predictor::Hybrid { model: &h, roster: &roster, eval_seed: 1 } },
    ];
    let grids = vec![
        PerturbationGrid { family: Family::GaussianNoise, levels: vec![0.0, 0.05, 0.1] },
        PerturbationGrid { family: Family::Occlusion, levels: vec![0.04, 0.12] },
    ];
    let r = sweep(&models, &ds, &grids, 9).unwrap();
    assert_eq!(r.rows.len(), 2 * (1 + 5));
    assert_eq!(r.rows[0].report, evaluate(models[0].predictor, &ds).unwrap());
    assert_eq!(r.rows[1].report, evaluate(models[1].predictor, &ds).unwrap());
    // Level 0 of a family reproduces the clean result.
    assert_eq!(r.rows[2].report, r.rows[0].report);
    assert_eq!(r.rows[3].report, r.rows[1].report);
    let again = sweep(&models, &ds, &grids, 9).unwrap();
    assert_eq!(again.to_csv(), r.to_csv());
    assert_eq!(serde_json::to_string(&again).unwrap(), serde_json::to_string(&r).unwrap());

    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "family,level,model,accuracy,precision,recall,f1,specificity,auc");
    assert!(lines[1].starts_with("clean,none,2d,"));
    assert!(lines[3].starts_with("gaussian_noise,0,2d,"));
    assert!(lines[8].starts_with("gaussian_noise,0.1,hybrid,"));
    let acc: &str = lines[1].split(',').nth(3).unwrap();
    assert_eq!(acc, format!("{:.2}", 100.0 * r.rows[0].report.accuracy));
}

#[test]
fn full_contrast_collapses_to_one_prediction() {
    let ds = fixture();
    let (a, _) = nets();
    let models = [NamedModel { name: "2d", predictor: Predictor::TwoD(&a) }];
    let grids = vec![PerturbationGrid { family: Family::Contrast, levels: vec![1.0] }];
    let r = sweep(&models, &ds, &grids, 0).unwrap();
    let rep = &r.rows[1].report;
    let cm = rep.confusion.rows();
    let predicted: Vec<usize> = (0..4).filter(|&p| cm.iter().any(|row| row[p] > 0)).collect();
    assert_eq!(predicted.len(), 1);
    let p = predicted[0];
    let freq = ds.labels().iter().filter(|&&l| l == p).count() as f64 / ds.len() as f64;
    assert_eq!(rep.accuracy, freq);
    assert_eq!(rep.accuracy, 0.25);
}

fn row(family: &str, level: f64, model: &str, accuracy_num: usize) -> SweepRow {
    // Four samples; the first `accuracy_num` predicted correctly.
    let labels = [0, 1, 0, 1];
    let preds: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| if i < accuracy_num { l } else { 1 - l }).collect();
    let scores: Vec<f64> = preds.iter().flat_map(|&p| if p == 0 { [0.8, 0.2] } else { [0.2, 0.8] }).collect();
    let names = vec!["a".to_string(), "b".to_string()];
    SweepRow {
        family: family.into(),
        level: Some(level),
        model: model.into(),
        report: MetricsReport::compute(&labels, &preds, &scores, &names).unwrap(),
    }
}

#[test]
fn trend_verdicts() {
    let rows = vec![
        row("gaussian_noise", 0.1, "x", 4),
        row("gaussian_noise", 0.1, "y", 3),
        row("gaussian_noise", 0.2, "x", 3),
        row("gaussian_noise", 0.2, "y", 3),
        row("gaussian_noise", 0.3, "x", 1),
        row("gaussian_noise", 0.3, "y", 3),
        row("occlusion", 0.1, "x", 2),
        row("occlusion", 0.1, "y", 4),
        row("occlusion", 0.2, "x", 3),
        row("occlusion", 0.2, "y", 3),
    ];
    let t = trend_summary(&rows);
    let get = |f: &str, m: &str| t.models.iter().find(|r| r.family == f && r.model == m).unwrap();
    assert_eq!(get("gaussian_noise", "x").verdict, Verdict::Monotone);
    assert_eq!(get("gaussian_noise", "x").decreasing_prefix, 3);
    assert_eq!(get("gaussian_noise", "y").verdict, Verdict::Flat);
    assert_eq!(get("occlusion", "x").verdict, Verdict::Mixed);
    assert_eq!(get("occlusion", "x").decreasing_prefix, 1);
    assert_eq!(get("occlusion", "x").max_rise, 0.25);
    assert_eq!(t.pairs[0].signs, vec![1, 0, -1]);
    assert_eq!(t.pairs[1].signs, vec![-1, 0]);
}
