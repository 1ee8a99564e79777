// Reference constants keep every digit of their high-precision source.
#![allow(clippy::excessive_precision)]

use alzhinet_core::autodiff::gradcheck::{check_primitives, gradcheck};
use alzhinet_core::autodiff::BatchNormMode;
use alzhinet_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Straight nested-loop convolution over `[N, C, D, H, W]` with zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (o, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let out = |e: usize, k: usize| (e + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out(d, kd), out(h, kh), out(wd, kw));
    let mut y = vec![0.0; n * o * od * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for z in 0..od {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for a in 0..kd {
                                for p in 0..kh {
                                    for q in 0..kw {
                                        let zz = (z * stride + a) as isize - pad as isize;
                                        let yy = (i * stride + p) as isize - pad as isize;
                                        let xx = (j * stride + q) as isize - pad as isize;
                                        if zz < 0 || yy < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (zz, yy, xx) = (zz as usize, yy as usize, xx as usize);
                                        if zz >= d || yy >= h || xx >= wd {
                                            continue;
                                        }
                                        let xv = x.data()[(((ni * c + ci) * d + zz) * h + yy) * wd + xx];
                                        let wv = w.data()[(((oi * c + ci) * kd + a) * kh + p) * kw + q];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[(((ni * o + oi) * od + z) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
    }
    (vec![n, o, od, oh, ow], y)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv3d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (shape, wshape, stride, pad) in [
        ([2, 3, 4, 6, 5], [4, 3, 3, 3, 3], 1, 1),
        ([1, 2, 5, 7, 7], [3, 2, 3, 3, 3], 2, 1),
        ([1, 1, 3, 4, 4], [2, 1, 1, 2, 2], 1, 0),
    ] {
        let x = random(&mut rng, &shape);
        let w = random(&mut rng, &wshape);
        let b = random(&mut rng, &[wshape[0]]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(&x), tape.constant(&w), tape.constant(&b));
        let y = tape.conv3d(xv, wv, Some(bv), stride, pad).unwrap();
        let (s, expect) = naive_conv(&x, &w, b.data(), stride, pad);
        assert_eq!(tape.shape(y), &s[..]);
        assert!(max_abs_diff(tape.value(y).data(), &expect) < 1e-12);
    }
}

/// Large enough that the unfolded patches are processed in several tiles,
/// the last one ragged. Gradients are checked through linearity: for
/// `L = <r, conv(x, w)>`, `L(x + e_i) - L(x)` is exactly `dL/dx_i`.
#[test]
fn tiled_conv3d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, &[2, 16, 4, 19, 32]);
    let w = random(&mut rng, &[2, 16, 3, 3, 3]);
    let b = random(&mut rng, &[2]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
    let y = tape.conv3d(xv, wv, Some(bv), 1, 1).unwrap();
    let (_, expect) = naive_conv(&x, &w, b.data(), 1, 1);
    assert!(max_abs_diff(tape.value(y).data(), &expect) < 1e-12);

    let r: Vec<f64> = (0..expect.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l = tape.weighted_sum(y, &r).unwrap();
    let grads = tape.backward(l).unwrap();
    let loss =
        |x: &Tensor, w: &Tensor| -> f64 { naive_conv(x, w, b.data(), 1, 1).1.iter().zip(&r).map(|(a, b)| a * b).sum() };
    let base = loss(&x, &w);
    for _ in 0..12 {
        let i = rng.random_range(0..x.numel());
        let mut xp = x.detached();
        xp.data_mut()[i] += 1.0;
        assert!((loss(&xp, &w) - base - grads.get(xv).unwrap()[i]).abs() < 1e-9);
        let j = rng.random_range(0..w.numel());
        let mut wp = w.detached();
        wp.data_mut()[j] += 1.0;
        assert!((loss(&x, &wp) - base - grads.get(wv).unwrap()[j]).abs() < 1e-9);
    }
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (shape, wshape, stride, pad) in
        [([2, 3, 9, 9], [4, 3, 7, 7], 2, 3), ([1, 4, 6, 5], [2, 4, 3, 3], 1, 1), ([2, 2, 8, 8], [3, 2, 1, 1], 2, 0)]
    {
        let x = random(&mut rng, &shape);
        let w = random(&mut rng, &wshape);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(&x), tape.constant(&w));
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();

        let x5 = x.detached().reshape(vec![shape[0], shape[1], 1, shape[2], shape[3]]).unwrap();
        let w5 = w.detached().reshape(vec![wshape[0], wshape[1], 1, wshape[2], wshape[3]]).unwrap();
        // Depth is 1, so depth padding must not add output planes.
        let (s, expect) = naive_conv_2d_via_3d(&x5, &w5, stride, pad);
        assert_eq!(tape.shape(y), &[s[0], s[1], s[3], s[4]]);
        assert!(max_abs_diff(tape.value(y).data(), &expect) < 1e-12);
    }
}

fn naive_conv_2d_via_3d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    // Pad only spatially: run the reference on each depth-1 slice with pad 0 in depth
    // by embedding the padding into the input.
    let xs = x.shape();
    let (n, c, h, wd) = (xs[0], xs[1], xs[3], xs[4]);
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let mut padded = vec![0.0; n * c * hp * wp];
    for p in 0..n * c {
        for i in 0..h {
            for j in 0..wd {
                padded[(p * hp + i + pad) * wp + j + pad] = x.data()[(p * h + i) * wd + j];
            }
        }
    }
    let xp = Tensor::new(vec![n, c, 1, hp, wp], padded).unwrap();
    naive_conv(&xp, w, &vec![0.0; w.shape()[0]], stride, 0)
}

#[test]
fn every_primitive_passes_gradcheck() {
    for seed in [0, 1, 2] {
        for check in check_primitives(seed, 1e-6).unwrap() {
            assert!(check.max_rel_error < 1e-6, "{} seed {seed}: {}", check.name, check.max_rel_error);
        }
    }
}

#[test]
fn softmax_and_cross_entropy_match_high_precision_values() {
    // 30-digit references for softmax([1, 2, 3]).
    let expect = [
        0.090_030_573_170_380_457_998_022_101_484_494_2,
        0.244_728_471_054_797_652_472_959_618_340_775,
        0.665_240_955_774_821_889_529_018_280_174_743,
    ];
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let s = tape.softmax(x).unwrap();
    assert!(max_abs_diff(tape.value(s).data(), &expect) < 1e-15);

    let l = tape.cross_entropy(x, &[2]).unwrap();
    assert!((tape.value(l).item().unwrap() - 0.407_605_964_444_380_304_482_919_904_545).abs() < 1e-15);
    let l = tape.cross_entropy(x, &[0]).unwrap();
    assert!((tape.value(l).item().unwrap() - 2.407_605_964_444_380_304_482_919_904_54).abs() < 1e-15);
}

#[test]
fn two_logit_bce_equals_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[6, 2]).map_scaled(4.0);
    let targets = [0, 1, 1, 0, 1, 0];

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let ce = tape.cross_entropy(xv, &targets).unwrap();
    let ce_value = tape.value(ce).item().unwrap();
    let ce_grad = tape.backward(ce).unwrap().get(xv).unwrap().to_vec();

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let bce = tape.binary_cross_entropy(xv, &targets).unwrap();
    let bce_value = tape.value(bce).item().unwrap();
    let bce_grad = tape.backward(bce).unwrap().get(xv).unwrap().to_vec();

    assert!((ce_value - bce_value).abs() < 1e-9);
    assert!(max_abs_diff(&ce_grad, &bce_grad) < 1e-9);
}

#[test]
fn composite_network_gradcheck() {
    // conv -> bn -> relu -> pool -> dense -> cross-entropy, checked end to end.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = random(&mut rng, &[3, 2, 3, 3, 3]);
    let g = random(&mut rng, &[3]);
    let b = random(&mut rng, &[3]);
    let fw = random(&mut rng, &[4, 3]);
    let fb = random(&mut rng, &[4]);
    let f = |tape: &mut Tape, x| {
        let (wv, gv, bv) = (tape.constant(&w), tape.constant(&g), tape.constant(&b));
        let h = tape.conv3d(x, wv, None, 1, 1)?;
        let (h, _) = tape.batch_norm(h, gv, bv, BatchNormMode::Train, 1e-5)?;
        let h = tape.relu(h);
        let h = tape.global_avg_pool(h)?;
        let h = tape.flatten(h)?;
        let (fwv, fbv) = (tape.constant(&fw), tape.constant(&fb));
        let z = tape.dense(h, fwv, fbv)?;
        tape.cross_entropy(z, &[1, 3])
    };
    let x = random(&mut rng, &[2, 2, 3, 4, 4]);
    let err = gradcheck(f, &x, 1e-6).unwrap();
    assert!(err < 1e-6, "{err}");
}

trait Scaled {
    fn map_scaled(self, k: f64) -> Tensor;
}

impl Scaled for Tensor {
    fn map_scaled(mut self, k: f64) -> Tensor {
        self.data_mut().iter_mut().for_each(|v| *v *= k);
        self
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![3, 4], data).unwrap());
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(data in prop::collection::vec(-30.0f64..30.0, 8), t in 0usize..4) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 4], data).unwrap());
        let l = tape.cross_entropy(x, &[t, 3 - t]).unwrap();
        prop_assert!(tape.value(l).item().unwrap() >= 0.0);
    }

    #[test]
    fn batch_norm_input_gradient_sums_to_zero(data in prop::collection::vec(-3.0f64..3.0, 16)) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![4, 2, 2], data).unwrap());
        let g = tape.leaf(&Tensor::full(&[2], 1.5));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        let (y, _) = tape.batch_norm(x, g, b, BatchNormMode::Train, 1e-5).unwrap();
        let w: Vec<f64> = (0..16).map(|i| (i as f64 * 0.9).cos()).collect();
        let l = tape.weighted_sum(y, &w).unwrap();
        let grads = tape.backward(l).unwrap();
        let dx = grads.get(x).unwrap();
        for ch in 0..2 {
            let s: f64 = (0..4).flat_map(|n| [dx[n * 4 + ch * 2], dx[n * 4 + ch * 2 + 1]]).sum();
            prop_assert!(s.abs() < 1e-9);
        }
    }
}
