use alzhinet_core::augment::{build_volume, default_roster, SeedContext};
use alzhinet_core::image::Image;
use alzhinet_core::model::*;
use alzhinet_core::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn small_hybrid(alpha: f64, beta: f64, seed: u64) -> HybridModel {
    let two = TwoDNet::new(TwoDNetConfig::new(4, 0.125), seed).unwrap();
    let three = ThreeDNet::new(ThreeDNetConfig::new(4, 0.125), seed).unwrap();
    HybridModel::new(two, three, alpha, beta).unwrap()
}

fn within(count: usize, reference: f64, tol: f64) -> bool {
    (count as f64 - reference).abs() / reference <= tol
}

#[test]
fn two_d_parameter_count_and_head_shape() {
    let net = TwoDNet::new(TwoDNetConfig::new(4, 1.0), 0).unwrap();
    let head = net.params().find("two_d.fc.weight").unwrap();
    assert_eq!(net.params().value(head).shape(), &[4, 512]);
    let total = net.params().num_trainable();
    // torchvision's ResNet-18 with a 4-way head.
    assert_eq!(total, 11_178_564);
    assert!(within(total - net.head_parameters(), 11.18e6, 0.02));
    assert_eq!(TwoDNetConfig::new(4, 0.125).stage_widths(), vec![8, 16, 32, 64]);
    assert!(TwoDNet::new(TwoDNetConfig::new(4, 0.05), 0).is_err());
    assert!(TwoDNet::new(TwoDNetConfig::new(1, 1.0), 0).is_err());
}

#[test]
fn three_d_parameter_count() {
    let net = ThreeDNet::new(ThreeDNetConfig::new(4, 1.0), 0).unwrap();
    let total = net.params().num_trainable();
    assert_eq!(total, 1_246_084);
    assert!(within(total - net.head_parameters(), 1.22e6, 0.02));
    let conv2 = net.params().find("three_d.conv2.weight").unwrap();
    assert_eq!(net.params().value(conv2).shape(), &[128, 64, 3, 3, 3]);
    let fc1 = net.params().find("three_d.fc1.weight").unwrap();
    assert_eq!(net.params().value(fc1).shape(), &[512, 256]);
}

#[test]
fn hybrid_parameter_count() {
    let two = TwoDNet::new(TwoDNetConfig::new(4, 1.0), 0).unwrap();
    let three = ThreeDNet::new(ThreeDNetConfig::new(4, 1.0), 0).unwrap();
    let h = HybridModel::new(two, three, 0.5, 0.5).unwrap();
    assert!(within(h.num_trainable(), 12.4e6, 0.02), "{}", h.num_trainable());
}

#[test]
fn shape_chains() {
    let two = TwoDNet::new(TwoDNetConfig::new(4, 0.125), 1).unwrap();
    assert_eq!(two.logits(&random_tensor(&[2, 3, 32, 32], 1)).unwrap().shape(), &[2, 4]);
    let three = ThreeDNet::new(ThreeDNetConfig::new(4, 0.125), 1).unwrap();
    assert_eq!(three.logits(&random_tensor(&[1, 3, 9, 32, 32], 2)).unwrap().shape(), &[1, 4]);
    assert_eq!(three.logits(&random_tensor(&[1, 3, 3, 32, 32], 2)).unwrap().shape(), &[1, 4]);
    // Full resolution through a very narrow encoder.
    let thin = ThreeDNet::new(ThreeDNetConfig::new(4, 1.0 / 32.0), 1).unwrap();
    assert_eq!(thin.logits(&random_tensor(&[1, 3, 9, 224, 224], 3)).unwrap().shape(), &[1, 4]);
    assert!(matches!(three.logits(&random_tensor(&[1, 3, 32, 32], 2)), Err(Error::Dimension(_))));
}

#[test]
fn eval_forward_is_pure() {
    let h = small_hybrid(0.5, 0.5, 2);
    let x = random_tensor(&[3, 3, 32, 32], 4);
    let v = random_tensor(&[3, 3, 9, 32, 32], 5);
    let a = h.predict(&x, &v).unwrap();
    let b = h.predict(&x, &v).unwrap();
    assert_eq!(a, b);
    for row in a.s2d.data().chunks(4).chain(a.s3d.data().chunks(4)) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn combined_logits_are_exact() {
    let o2d = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
    let o3d = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
    assert_eq!(combine_logits(&o2d, &o3d, 0.5, 0.5).unwrap().data(), &[1.0, 1.0]);

    let h = small_hybrid(0.5, 0.5, 3);
    let x = random_tensor(&[4, 3, 32, 32], 6);
    let v = random_tensor(&[4, 3, 9, 32, 32], 7);
    let out = h.predict(&x, &v).unwrap();
    for i in 0..out.oh.numel() {
        assert_eq!(out.oh.data()[i], 0.5 * out.o2d.data()[i] + 0.5 * out.o3d.data()[i]);
    }
    assert_eq!(
        out.oh.argmax_rows().unwrap(),
        combine_logits(&out.o2d, &out.o3d, 0.5, 0.5).unwrap().argmax_rows().unwrap()
    );

    let mut degenerate = h.clone();
    degenerate.set_weights(1.0, 0.0).unwrap();
    let out = degenerate.predict(&x, &v).unwrap();
    assert_eq!(out.oh, out.o2d);
    assert!(degenerate.set_weights(0.0, 0.0).is_err());
    assert!(degenerate.set_weights(-1.0, 1.0).is_err());
}

#[test]
fn hybrid_rejects_misaligned_batches() {
    let h = small_hybrid(0.5, 0.5, 3);
    let mut tape = Tape::new();
    let r = h.forward(&mut tape, &random_tensor(&[2, 3, 32, 32], 1), &random_tensor(&[3, 3, 9, 32, 32], 1), false);
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn argmax_is_invariant_to_positive_weight_scaling() {
    let mut h = small_hybrid(0.3, 0.7, 4);
    let x = random_tensor(&[6, 3, 32, 32], 8);
    let v = random_tensor(&[6, 3, 9, 32, 32], 9);
    let base = h.predict(&x, &v).unwrap().oh.argmax_rows().unwrap();
    for c in [0.01, 2.0, 1000.0] {
        h.set_weights(0.3 * c, 0.7 * c).unwrap();
        assert_eq!(h.predict(&x, &v).unwrap().oh.argmax_rows().unwrap(), base);
    }
}

#[test]
fn training_forward_updates_running_stats() {
    let mut net = TwoDNet::new(TwoDNetConfig::new(3, 0.125), 5).unwrap();
    let x = random_tensor(&[4, 3, 32, 32], 10);
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let pass = net.forward(&mut tape, xv, true).unwrap();
    assert!(!pass.bindings.is_empty());
    let before = net.params().clone();
    commit_stats(net.params_mut(), &pass.stats);
    let id = net.params().find("two_d.stem.bn.running_mean").unwrap();
    assert_ne!(net.params().value(id), before.value(id));
    let gamma = net.params().find("two_d.stem.bn.gamma").unwrap();
    assert_eq!(net.params().value(gamma), before.value(gamma));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = TwoDNet::new(TwoDNetConfig::new(4, 0.125), 6).unwrap();
    // Perturb running statistics so they are part of what must survive.
    let id = net.params().find("two_d.layer1.0.bn1.running_var").unwrap();
    net.params_mut().value_mut(id).data_mut()[0] = 1.2345678901234567;
    let x = random_tensor(&[2, 3, 32, 32], 11);
    let path = dir.path().join("two_d.azwt");
    net.save_weights(&path).unwrap();

    let mut fresh = TwoDNet::new(TwoDNetConfig::new(4, 0.125), 99).unwrap();
    assert_ne!(fresh.logits(&x).unwrap(), net.logits(&x).unwrap());
    fresh.load_weights(&path).unwrap();
    assert_eq!(fresh.params(), net.params());
    assert_eq!(fresh.logits(&x).unwrap(), net.logits(&x).unwrap());

    let three = ThreeDNet::new(ThreeDNetConfig::new(4, 0.125), 1).unwrap();
    let p3 = dir.path().join("three_d.azwt");
    three.save_weights(&p3).unwrap();
    match fresh.load_weights(&p3) {
        Err(Error::ParameterMismatch { name, .. }) => assert_eq!(name, "two_d.stem.conv.weight"),
        other => panic!("expected mismatch, got {other:?}"),
    }
    let wide = TwoDNet::new(TwoDNetConfig::new(4, 0.25), 1).unwrap();
    let pw = dir.path().join("wide.azwt");
    wide.save_weights(&pw).unwrap();
    assert!(matches!(fresh.load_weights(&pw), Err(Error::ParameterMismatch { .. })));
    assert_eq!(fresh.params(), net.params(), "failed loads leave weights untouched");

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(fresh.load_weights(&path), Err(Error::Format(_))));

    let h = small_hybrid(0.5, 0.5, 7);
    let ph = dir.path().join("hybrid.azwt");
    h.save_weights(&ph).unwrap();
    let mut h2 = small_hybrid(0.5, 0.5, 8);
    h2.load_weights(&ph).unwrap();
    assert_eq!(h2.two_d.params(), h.two_d.params());
    assert_eq!(h2.three_d.params(), h.three_d.params());
    assert!(matches!(fresh.load_weights(&ph), Err(Error::ParameterMismatch { .. })));
}

#[test]
fn batches_from_images_and_volumes() {
    let img = Image::filled(3, 8, 8, 0.25).unwrap();
    let t = image_batch([&img, &img]).unwrap();
    assert_eq!(t.shape(), &[2, 3, 8, 8]);
    let vol = build_volume(&img, &default_roster(), SeedContext::default()).unwrap();
    let v = volume_batch(&[vol.clone(), vol]).unwrap();
    assert_eq!(v.shape(), &[2, 3, 9, 8, 8]);
    assert!(image_batch([]).is_err());
}
