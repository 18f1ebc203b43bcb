//! Unit tests for the autodiff engine. Expected values come from hand
//! arithmetic or from the independent loop oracles defined here, never from
//! the ops under test.

use super::*;
use crate::error::Error;
use crate::rng::Rng;
use ops::{concat_lastdim, dense, weighted_bce};

fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn param(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::param(shape, data.to_vec()).unwrap()
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Direct triple-loop valid convolution, independent of the op implementation.
fn conv1d_oracle(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    (b, cin, len): (usize, usize, usize),
    (cout, k): (usize, usize),
    stride: usize,
) -> Vec<f64> {
    let out_len = (len - k) / stride + 1;
    let mut out = vec![0.0; b * cout * out_len];
    for bi in 0..b {
        for o in 0..cout {
            for t in 0..out_len {
                let mut acc = bias[o];
                for i in 0..cin {
                    for kk in 0..k {
                        acc += x[(bi * cin + i) * len + t * stride + kk]
                            * w[(o * cin + i) * k + kk];
                    }
                }
                out[(bi * cout + o) * out_len + t] = acc;
            }
        }
    }
    out
}

/// Brute-force window max, independent of the op implementation.
fn maxpool_oracle(
    x: &[f64],
    (b, c, len): (usize, usize, usize),
    pool: usize,
    stride: usize,
) -> Vec<f64> {
    let out_len = (len - pool) / stride + 1;
    let mut out = vec![0.0; b * c * out_len];
    for row in 0..b * c {
        for t in 0..out_len {
            let window = &x[row * len + t * stride..row * len + t * stride + pool];
            out[row * out_len + t] = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

// ── matmul ──────────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let eye = tensor(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let m = tensor(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let out = eye.matmul(&m).unwrap();
    assert_eq!(out.data(), m.data());
}

#[test]
fn matmul_hand_arithmetic() {
    let a = tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = tensor(&[2, 1], &[1.0, 1.0]);
    let out = a.matmul(&b).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = tensor(&[2, 3], &[0.0; 6]);
    let b = tensor(&[4, 2], &[0.0; 8]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = Rng::new(11);
    let specs = vec![
        InputSpec::random(&[4, 5], &mut rng),
        InputSpec::random(&[5, 3], &mut rng),
    ];
    let report = check_gradients(
        "matmul",
        &specs,
        |leaves| Ok(leaves[0].matmul(&leaves[1])?.sum_all()),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

// ── conv1d ──────────────────────────────────────────────────────────────

#[test]
fn conv1d_output_length_formula() {
    let x = Tensor::zeros(&[1, 1, 7680]);
    let w = Tensor::zeros(&[64, 1, 64]);
    let b = Tensor::zeros(&[64]);
    let out = x.conv1d(&w, &b, 8).unwrap();
    assert_eq!(out.shape(), &[1, 64, 953]);
}

#[test]
fn conv1d_identity_kernel() {
    let mut rng = Rng::new(3);
    let data = random_vec(&mut rng, 10);
    let x = tensor(&[1, 1, 10], &data);
    let w = tensor(&[1, 1, 1], &[1.0]);
    let b = tensor(&[1], &[0.0]);
    let out = x.conv1d(&w, &b, 1).unwrap();
    assert_eq!(out.data(), &data[..]);
}

#[test]
fn conv1d_matches_triple_loop_oracle() {
    let mut rng = Rng::new(21);
    let x = random_vec(&mut rng, 2 * 3 * 20);
    let w = random_vec(&mut rng, 4 * 3 * 5);
    let bias = random_vec(&mut rng, 4);
    let expected = conv1d_oracle(&x, &w, &bias, (2, 3, 20), (4, 5), 2);
    let out = tensor(&[2, 3, 20], &x)
        .conv1d(&tensor(&[4, 3, 5], &w), &tensor(&[4], &bias), 2)
        .unwrap();
    let max_diff = out
        .data()
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(max_diff < 1e-12, "max diff {max_diff}");
}

#[test]
fn conv1d_gradients_match_finite_differences() {
    let mut rng = Rng::new(22);
    let specs = vec![
        InputSpec::random(&[2, 3, 20], &mut rng),
        InputSpec::random(&[4, 3, 5], &mut rng),
        InputSpec::random(&[4], &mut rng),
    ];
    let report = check_gradients(
        "conv1d",
        &specs,
        |l| Ok(l[0].conv1d(&l[1], &l[2], 2)?.sum_all()),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn conv1d_rejects_short_input_and_zero_stride() {
    let x = Tensor::zeros(&[1, 1, 4]);
    let w = Tensor::zeros(&[1, 1, 8]);
    let b = Tensor::zeros(&[1]);
    assert!(matches!(x.conv1d(&w, &b, 1), Err(Error::Arg(_))));
    let w2 = Tensor::zeros(&[1, 1, 2]);
    assert!(matches!(x.conv1d(&w2, &b, 0), Err(Error::Arg(_))));
}

// ── maxpool1d ───────────────────────────────────────────────────────────

#[test]
fn maxpool_hand_arithmetic() {
    let x = tensor(&[1, 1, 4], &[1.0, 3.0, 2.0, 5.0]);
    let out = x.maxpool1d(2, 2).unwrap();
    assert_eq!(out.data(), &[3.0, 5.0]);
}

#[test]
fn maxpool_tie_routes_gradient_to_first_element() {
    let x = param(&[1, 1, 4], &[2.0, 2.0, 2.0, 2.0]);
    let out = x.maxpool1d(2, 2).unwrap();
    assert_eq!(out.data(), &[2.0, 2.0]);
    backward(&out.sum_all()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn maxpool_matches_brute_force_oracle() {
    let mut rng = Rng::new(31);
    let data = random_vec(&mut rng, 2 * 2 * 17);
    let expected = maxpool_oracle(&data, (2, 2, 17), 2, 2);
    let out = tensor(&[2, 2, 17], &data).maxpool1d(2, 2).unwrap();
    assert_eq!(out.data(), &expected[..]);
}

#[test]
fn maxpool_rejects_window_longer_than_input() {
    let x = Tensor::zeros(&[1, 1, 3]);
    assert!(matches!(x.maxpool1d(4, 1), Err(Error::Arg(_))));
}

// ── dense ───────────────────────────────────────────────────────────────

#[test]
fn dense_identity_weights() {
    let x = tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let w = tensor(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let b = tensor(&[2], &[0.0, 0.0]);
    let out = dense(&x, &w, &b).unwrap();
    assert_eq!(out.data(), x.data());
}

#[test]
fn dense_hand_arithmetic() {
    let x = tensor(&[1, 2], &[1.0, 1.0]);
    let w = tensor(&[2, 1], &[2.0, 3.0]);
    let b = tensor(&[1], &[1.0]);
    let out = dense(&x, &w, &b).unwrap();
    assert_eq!(out.data(), &[6.0]);
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut rng = Rng::new(41);
    let specs = vec![
        InputSpec::random(&[3, 4], &mut rng),
        InputSpec::random(&[4, 2], &mut rng),
        InputSpec::random(&[2], &mut rng),
    ];
    let report = check_gradients(
        "dense",
        &specs,
        |l| Ok(dense(&l[0], &l[1], &l[2])?.sum_all()),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

// ── elementwise ─────────────────────────────────────────────────────────

#[test]
fn relu_values() {
    let x = tensor(&[3], &[-1.0, 0.0, 2.0]);
    assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn sigmoid_at_zero_is_half() {
    assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
}

#[test]
fn sigmoid_extreme_negative_is_tiny_but_positive() {
    let v = Tensor::scalar(-800.0).sigmoid().item();
    assert!(v > 0.0 && v <= 1e-300 && v.is_finite(), "sigmoid(-800) = {v}");
    let w = Tensor::scalar(800.0).sigmoid().item();
    assert!(w < 1.0 && w.is_finite());
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let x = param(&[3], &[-1.0, 0.0, 2.0]);
    backward(&x.relu().sum_all()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
}

// ── softmax ─────────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_case() {
    let x = tensor(&[4], &[0.0; 4]);
    assert_eq!(x.softmax_lastdim().data(), &[0.25, 0.25, 0.25, 0.25]);
}

#[test]
fn softmax_shift_invariance_no_overflow() {
    let x = tensor(&[2], &[1000.0, 1000.0]);
    let out = x.softmax_lastdim();
    assert_eq!(out.data(), &[0.5, 0.5]);
}

#[test]
fn softmax_slices_sum_to_one() {
    let mut rng = Rng::new(51);
    let data = random_vec(&mut rng, 6 * 5);
    let out = tensor(&[6, 5], &data).softmax_lastdim();
    for slice in out.data().chunks(5) {
        let s: f64 = slice.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "sum {s}");
        assert!(slice.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn softmax_jacobian_matches_finite_differences() {
    let mut rng = Rng::new(52);
    let spec = InputSpec::random(&[5], &mut rng);
    // random linear functional of the softmax output exercises the full Jacobian
    let probe = random_vec(&mut rng, 5);
    let probe_t = tensor(&[5], &probe);
    let report = check_gradients(
        "softmax",
        &[spec],
        move |l| Ok(l[0].softmax_lastdim().mul(&probe_t)?.sum_all()),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

// ── layer_norm ──────────────────────────────────────────────────────────

#[test]
fn layer_norm_constant_slice_is_zero() {
    let x = tensor(&[1, 4], &[3.0; 4]);
    let gamma = tensor(&[4], &[1.0; 4]);
    let beta = tensor(&[4], &[0.0; 4]);
    let out = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
    assert!(out.data().iter().all(|v| v.abs() < 1e-9), "{:?}", out.data());
}

#[test]
fn layer_norm_hand_arithmetic() {
    // mean 2, population var 1 -> normalized [-1, 1]
    let x = tensor(&[1, 2], &[1.0, 3.0]);
    let gamma = tensor(&[2], &[1.0; 2]);
    let beta = tensor(&[2], &[0.0; 2]);
    let out = x.layer_norm(&gamma, &beta, 1e-14).unwrap();
    assert!((out.data()[0] + 1.0).abs() < 1e-6);
    assert!((out.data()[1] - 1.0).abs() < 1e-6);
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    let mut rng = Rng::new(61);
    let specs = vec![
        InputSpec::random(&[2, 6], &mut rng),
        InputSpec::random(&[6], &mut rng),
        InputSpec::random(&[6], &mut rng),
    ];
    let probe = tensor(&[2, 6], &random_vec(&mut rng, 12));
    let report = check_gradients(
        "layer_norm",
        &specs,
        move |l| {
            Ok(l[0]
                .layer_norm(&l[1], &l[2], 1e-5)?
                .mul(&probe)?
                .sum_all())
        },
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

// ── dropout ─────────────────────────────────────────────────────────────

#[test]
fn dropout_rate_zero_is_identity() {
    let x = tensor(&[4], &[1.0, 2.0, 3.0, 4.0]);
    let mut rng = Rng::new(1);
    let out = x.dropout(0.0, &mut rng, true).unwrap();
    assert_eq!(out.data(), x.data());
}

#[test]
fn dropout_inference_is_identity() {
    let x = tensor(&[4], &[1.0, 2.0, 3.0, 4.0]);
    let mut rng = Rng::new(1);
    let out = x.dropout(0.9, &mut rng, false).unwrap();
    assert_eq!(out.data(), x.data());
}

#[test]
fn dropout_statistics_at_half_rate() {
    let n = 100_000;
    let x = tensor(&[n], &vec![1.0; n]);
    let mut rng = Rng::new(77);
    let out = x.dropout(0.5, &mut rng, true).unwrap();
    let mean: f64 = out.data().iter().sum::<f64>() / n as f64;
    let zero_frac = out.data().iter().filter(|v| **v == 0.0).count() as f64 / n as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!((zero_frac - 0.5).abs() < 0.01, "zero fraction {zero_frac}");
}

#[test]
fn dropout_rejects_rate_one() {
    let x = tensor(&[1], &[1.0]);
    let mut rng = Rng::new(1);
    assert!(matches!(x.dropout(1.0, &mut rng, true), Err(Error::Arg(_))));
}

// ── backward ────────────────────────────────────────────────────────────

#[test]
fn backward_of_sum_is_ones() {
    let x = param(&[5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
    backward(&x.sum_all()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 5]);
}

#[test]
fn backward_of_sum_of_squares() {
    let x = param(&[2], &[1.0, 2.0]);
    let loss = x.mul(&x).unwrap().sum_all();
    backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_accumulates_over_shared_subexpressions() {
    let x = param(&[3], &[1.0, 2.0, 3.0]);
    let y = x.add(&x).unwrap();
    backward(&y.sum_all()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = param(&[3], &[1.0, 2.0, 3.0]);
    let err = backward(&x.relu()).unwrap_err();
    assert!(matches!(err, Error::Arg(_)));
}

#[test]
fn gradients_accumulate_across_two_backward_calls() {
    let x = param(&[2], &[1.0, 1.0]);
    let l1 = x.sum_all();
    backward(&l1).unwrap();
    let l2 = x.sum_all();
    backward(&l2).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

// ── weighted bce ────────────────────────────────────────────────────────

#[test]
fn bce_at_half_is_ln2() {
    let p = tensor(&[4], &[0.5; 4]);
    let y = [1.0, 0.0, 1.0, 0.0];
    let loss = weighted_bce(&p, &y, 1.0, 1.0).unwrap();
    assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bce_perfect_predictions_approach_zero() {
    let p = tensor(&[2], &[1.0 - 1e-9, 1e-9]);
    let y = [1.0, 0.0];
    let loss = weighted_bce(&p, &y, 1.0, 1.0).unwrap();
    assert!(loss.item() < 1e-8, "loss {}", loss.item());
}

#[test]
fn bce_gradients_match_finite_differences() {
    let mut rng = Rng::new(71);
    let data: Vec<f64> = (0..16).map(|_| rng.uniform(0.05, 0.95)).collect();
    let y: Vec<f64> = (0..16).map(|_| f64::from(rng.below(2) as u32)).collect();
    let spec = InputSpec::new(&[16], data);
    let report = check_gradients(
        "weighted_bce",
        &[spec],
        move |l| weighted_bce(&l[0], &y, 1.7, 0.6),
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

// ── structural ops ──────────────────────────────────────────────────────

#[test]
fn slice_and_concat_roundtrip_with_gradients() {
    let mut rng = Rng::new(81);
    let data = random_vec(&mut rng, 2 * 3 * 8);
    let x = param(&[2, 3, 8], &data);
    let a = x.slice_lastdim(0, 4).unwrap();
    let b = x.slice_lastdim(4, 4).unwrap();
    let back = concat_lastdim(&[a, b]).unwrap();
    assert_eq!(back.data(), x.data());
    backward(&back.sum_all()).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 48]);
}

#[test]
fn transpose_last2_gradients_match_finite_differences() {
    let mut rng = Rng::new(82);
    let specs = vec![InputSpec::random(&[2, 3, 4], &mut rng)];
    let probe = tensor(&[2, 4, 3], &random_vec(&mut rng, 24));
    let report = check_gradients(
        "transpose_last2",
        &specs,
        move |l| Ok(l[0].transpose_last2()?.mul(&probe)?.sum_all()),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed());
}

#[test]
fn bmm_gradients_match_finite_differences() {
    let mut rng = Rng::new(83);
    let specs = vec![
        InputSpec::random(&[2, 3, 4], &mut rng),
        InputSpec::random(&[2, 4, 2], &mut rng),
    ];
    let report = check_gradients(
        "bmm",
        &specs,
        |l| Ok(l[0].bmm(&l[1])?.sum_all()),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}

#[test]
fn add_broadcast_bias_over_batch() {
    let x = tensor(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let b = param(&[3], &[10.0, 20.0, 30.0]);
    let out = x.add_broadcast(&b).unwrap();
    assert_eq!(out.data(), &[10.0, 20.0, 30.0, 11.0, 21.0, 31.0]);
    backward(&out.sum_all()).unwrap();
    assert_eq!(b.grad().unwrap(), vec![2.0; 3]);
}

// ── cross-cutting invariants ────────────────────────────────────────────

#[test]
fn conv_and_pool_match_oracles_for_all_small_shapes() {
    let mut rng = Rng::new(91);
    for len in 1..=32usize {
        for stride in 1..=3usize {
            for k in 1..=len.min(5) {
                let x = random_vec(&mut rng, 2 * len);
                let w = random_vec(&mut rng, 3 * 2 * k);
                let bias = random_vec(&mut rng, 3);
                let expected = conv1d_oracle(&x, &w, &bias, (1, 2, len), (3, k), stride);
                let got = tensor(&[1, 2, len], &x)
                    .conv1d(&tensor(&[3, 2, k], &w), &tensor(&[3], &bias), stride)
                    .unwrap();
                assert_eq!(got.data(), &expected[..], "conv len={len} k={k} s={stride}");

                let expected_pool = maxpool_oracle(&x, (1, 2, len), k, stride);
                let got_pool = tensor(&[1, 2, len], &x).maxpool1d(k, stride).unwrap();
                assert_eq!(
                    got_pool.data(),
                    &expected_pool[..],
                    "pool len={len} k={k} s={stride}"
                );
            }
        }
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(7);
        let x = tensor(&[2, 3, 16], &random_vec(&mut rng, 96));
        let w = tensor(&[4, 3, 5], &random_vec(&mut rng, 60));
        let b = tensor(&[4], &random_vec(&mut rng, 4));
        let mut drop_rng = Rng::new(99);
        x.conv1d(&w, &b, 2)
            .unwrap()
            .relu()
            .dropout(0.3, &mut drop_rng, true)
            .unwrap()
            .softmax_lastdim()
            .data()
            .to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gradcheck_framework_flags_corrupted_gradient() {
    // negative control: a deliberately wrong backward must be caught
    let mut rng = Rng::new(101);
    let spec = InputSpec::random(&[4], &mut rng);
    let report = check_gradients(
        "corrupted",
        &[spec],
        |l| {
            // scale's analytic gradient is correct; sabotage by evaluating a
            // different function than the one differentiated
            let doubled = l[0].scale(2.0);
            if l[0].requires_grad() {
                Ok(doubled.sum_all())
            } else {
                Ok(l[0].scale(3.0).sum_all())
            }
        },
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(!report.passed(), "corrupted gradient slipped through");
    assert_eq!(report.name, "corrupted");
}
