use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, op_suite, tolerance};
use super::*;
use crate::tensor::Tensor;
use crate::ArlError;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct six-loop convolution, computed in f64.
fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[oc] as f64;
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad as isize;
                                let ix = (ox * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bn * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((oc * c + ic) * kh + i) * kw + j];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((bn * o + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_all_ones_sums_to_nine() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).item(), 9.0);
}

#[test]
fn conv_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = rand_tensor(&mut rng, &[2, 1, 4, 5]);
    let mut t = Tape::<f32>::new();
    let x = t.constant(input.clone());
    let w = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(t.value(y), &input);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let oracle = naive_conv(&x, &w, &b, 1, 1);
    let mut t = Tape::<f32>::new();
    let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
    let y = t.conv2d(xv, wv, bv, 1, 1).unwrap();
    assert_eq!(t.shape(y), &[2, 4, 8, 8]);
    for (a, e) in t.value(y).data().iter().zip(&oracle) {
        assert!((*a as f64 - e).abs() / e.abs().max(1.0) < 1e-6, "{} vs {}", a, e);
    }
}

#[test]
fn conv_rejects_channel_mismatch_naming_axes() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = t.constant(Tensor::zeros(&[1]));
    let err = t.conv2d(x, w, b, 1, 1).unwrap_err();
    assert!(err.to_string().contains("axis 1"), "{}", err);
}

#[test]
fn batchnorm_constant_channel_gives_beta() {
    let mut t = Tape::<f32>::new();
    let mut data = vec![0.0f32; 2 * 2 * 3 * 3];
    for (i, v) in data.iter_mut().enumerate() {
        *v = if (i / 9) % 2 == 0 { 4.0 } else { -7.5 };
    }
    let x = t.constant(Tensor::new(vec![2, 2, 3, 3], data).unwrap());
    let g = t.constant(Tensor::full(&[2], 2.0));
    let b = t.constant(Tensor::from_f64(&[2], &[0.25, -1.0]).unwrap());
    let mut stats = RunningStats::standard(2);
    let y = t
        .batchnorm2d(x, g, b, BnMode::Train { stats: &mut stats, momentum: 0.1 }, 1e-5)
        .unwrap();
    for (i, v) in t.value(y).data().iter().enumerate() {
        let expect = if (i / 9) % 2 == 0 { 0.25 } else { -1.0 };
        assert!((v - expect).abs() < 1e-6);
    }
}

#[test]
fn batchnorm_train_normalizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut input = rand_tensor(&mut rng, &[4, 3, 5, 5]);
    input.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + 2.0);
    let mut t = Tape::<f32>::new();
    let x = t.constant(input);
    let g = t.constant(Tensor::full(&[3], 1.0));
    let b = t.constant(Tensor::zeros(&[3]));
    let mut stats = RunningStats::standard(3);
    let y = t
        .batchnorm2d(x, g, b, BnMode::Train { stats: &mut stats, momentum: 0.1 }, 1e-5)
        .unwrap();
    let v = t.value(y).data();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| v[(n * 3 + ch) * 25..(n * 3 + ch + 1) * 25].iter().map(|&x| x as f64))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5, "mean {}", m);
        assert!((var - 1.0).abs() < 1e-3, "var {}", var);
    }
    assert!(stats.mean.iter().all(|&m| m > 0.0), "running mean moved toward batch mean");
}

#[test]
fn batchnorm_eval_without_stats_is_an_error() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let g = t.constant(Tensor::full(&[2], 1.0));
    let b = t.constant(Tensor::zeros(&[2]));
    let stats = RunningStats::<f32>::uninitialized(2);
    let err = t.batchnorm2d(x, g, b, BnMode::Eval { stats: &stats }, 1e-5).unwrap_err();
    assert!(matches!(err, ArlError::StatsUninitialized(_)));
    assert!(err.to_string().contains("stats-uninitialized"));
}

#[test]
fn elementwise_and_shape_examples() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap());
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 2.0]);

    let a = t.constant(Tensor::zeros(&[1, 64, 5, 5]));
    let b = t.constant(Tensor::zeros(&[1, 64, 5, 5]));
    let c = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.shape(c), &[1, 128, 5, 5]);

    let ragged = t.constant(Tensor::zeros(&[1, 64, 4, 5]));
    assert!(matches!(t.concat(&[a, ragged], 1), Err(ArlError::Dimension { .. })));
    assert!(matches!(t.concat(&[a, b], 4), Err(ArlError::Dimension { .. })));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut t = Tape::<f32>::new();
    let mut x = rand_tensor(&mut rng, &[6, 9]);
    x.data_mut().iter_mut().for_each(|v| *v *= 10.0);
    let x = t.constant(x);
    let y = t.softmax(x, 1).unwrap();
    for row in t.value(y).data().chunks(9) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn backward_basic_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::from_f64(&[3], &[0.5, -2.0, 4.0]).unwrap());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut t = Tape::<f64>::new();
    let x = t.param(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[6.0]);
    // without zero_grad a second pass accumulates
    t.backward(y).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[12.0]);
    t.zero_grad();
    assert!(t.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::<f32>::new();
    let x = t.param(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(x), Err(ArlError::Contract(_))));
}

#[test]
fn every_op_passes_fd_in_f64_on_ten_seeds() {
    for seed in 0..10 {
        for c in op_suite::<f64>(seed, None).unwrap() {
            assert!(c.passes(tolerance::<f64>()), "seed {}: {} err {:e}", seed, c.name, c.max_rel_err);
        }
    }
}

#[test]
fn every_op_passes_fd_in_f32_on_ten_seeds() {
    for seed in 0..10 {
        for c in op_suite::<f32>(seed, None).unwrap() {
            assert!(c.passes(tolerance::<f32>()), "seed {}: {} err {:e}", seed, c.name, c.max_rel_err);
        }
    }
}

#[test]
fn suite_lists_each_op_once() {
    let names: Vec<String> = op_suite::<f64>(0, None).unwrap().into_iter().map(|c| c.name).collect();
    assert_eq!(names.len(), OpKind::ALL.len());
    let mut dedup = names.clone();
    dedup.sort();
    dedup.dedup();
    assert_eq!(dedup.len(), names.len());
}

#[test]
fn corrupted_sigmoid_is_caught() {
    let checks = op_suite::<f64>(0, Some(OpKind::Sigmoid)).unwrap();
    let failing: Vec<_> = checks.iter().filter(|c| !c.passes(1e-6)).map(|c| c.name.as_str()).collect();
    assert_eq!(failing, vec!["sigmoid"]);
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0: Tensor<f64> = rand_tensor(&mut rng, &[2, 2, 4, 4]).cast();
    let w0: Tensor<f64> = rand_tensor(&mut rng, &[3, 2, 3, 3]).cast();
    let b0: Tensor<f64> = rand_tensor(&mut rng, &[3]).cast();
    let grads = |a: f64, b: f64| -> Vec<f64> {
        let mut t = Tape::new();
        let (x, w, bias) = (t.param(x0.clone()), t.param(w0.clone()), t.param(b0.clone()));
        let y = t.conv2d(x, w, bias, 1, 1).unwrap();
        let s = t.sigmoid(y);
        let l1 = t.mean(s);
        let sq = t.square(y);
        let l2 = t.sum(sq);
        let l1s = t.scale(l1, a);
        let l2s = t.scale(l2, b);
        let l = t.add(l1s, l2s).unwrap();
        t.backward(l).unwrap();
        [x, w, bias].iter().flat_map(|&v| t.grad(v).unwrap().to_vec()).collect()
    };
    let (a, b) = (0.7, -1.3);
    let g1 = grads(1.0, 0.0);
    let g2 = grads(0.0, 1.0);
    let gc = grads(a, b);
    for ((c, x), y) in gc.iter().zip(&g1).zip(&g2) {
        let e = a * x + b * y;
        assert!((c - e).abs() <= 1e-6 * e.abs().max(1e-12) + 1e-12, "{} vs {}", c, e);
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut t = Tape::<f32>::new();
        let x = t.constant(rand_tensor(&mut rng, &[3, 3, 8, 8]));
        let w = t.param(rand_tensor(&mut rng, &[4, 3, 3, 3]));
        let b = t.param(rand_tensor(&mut rng, &[4]));
        let g = t.param(Tensor::full(&[4], 1.0));
        let be = t.param(Tensor::zeros(&[4]));
        let mut stats = RunningStats::standard(4);
        let y = t.conv2d(x, w, b, 1, 1).unwrap();
        let y = t.batchnorm2d(y, g, be, BnMode::Train { stats: &mut stats, momentum: 0.1 }, 1e-5).unwrap();
        let y = t.relu(y);
        let y = t.maxpool2x2(y).unwrap();
        let l = t.mean(y);
        t.backward(l).unwrap();
        let mut out = t.value(y).data().to_vec();
        for v in [w, b, g, be] {
            out.extend_from_slice(t.grad(v).unwrap());
        }
        out.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn finite_inputs_give_finite_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut t = Tape::<f32>::new();
    let mut big = rand_tensor(&mut rng, &[4, 7]);
    big.data_mut().iter_mut().for_each(|v| *v *= 200.0);
    let x = t.param(big);
    let sm = t.softmax(x, 1).unwrap();
    let ls = t.log_softmax(x, 1).unwrap();
    let sg = t.sigmoid(x);
    let bce = t.bce_with_logits(x, &[0.5; 28]).unwrap();
    let parts = [t.sum(sm), t.sum(ls), t.sum(sg), t.sum(bce)];
    let mut total = parts[0];
    for p in &parts[1..] {
        total = t.add(total, *p).unwrap();
    }
    assert!(t.value(total).is_finite());
    t.backward(total).unwrap();
    assert!(t.grad(x).unwrap().iter().all(|g| g.is_finite()));
}

#[test]
fn fd_step_follows_cube_root_rule() {
    let h: f64 = gradcheck::fd_step(10.0);
    assert!((h - f64::EPSILON.cbrt() * 10.0).abs() < 1e-18);
}
