mod common;

use common::{gradcheck_op, naive_conv, randn, sliced_conv};
use gmnet_core::autodiff::Graph;
use gmnet_core::ops::{self, BatchNormState, ConvConfig, ConvWeights, Mode, BN_EPS, BN_MOMENTUM};
use gmnet_core::tensor::Tensor;
use gmnet_core::train::stream_rng;
use gmnet_core::Error;
use proptest::prelude::*;

const GRAD_TOL: f64 = 1e-4;

fn assert_grad(name: &str, r: common::GradReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.skipped * 10 <= r.checked, "{name}: too many kinks {r:?}");
    assert!(r.worst < GRAD_TOL, "{name}: {r:?}");
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize, u64)> {
    (1usize..3, prop_oneof![Just(1usize), Just(2), Just(4)], 1usize..4, 1usize..4, prop_oneof![Just(1usize), Just(3)], 1usize..3, 0usize..2, 3usize..8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grouped_conv_matches_oracles((n, g, cg, og, k, stride, pad, h, seed) in conv_case()) {
        prop_assume!(h + 2 * pad >= k && (h + 2 * pad - k) % stride == 0);
        let (c, o) = (g * cg, g * og);
        let cfg = ConvConfig { stride, padding: pad, groups: g };
        let x = randn(&[n, c, h, h], seed);
        let w = randn(&[o, cg, k, k], seed + 1);
        let b = randn(&[o], seed + 2);
        let got = ops::conv2d_forward(&x, &ConvWeights::new(w.clone(), Some(b.clone()), cfg).unwrap()).unwrap();
        let want = naive_conv(&x, &w, Some(b.data()), cfg);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(got.max_abs_diff(&want) < 1e-10);
        let unbiased = ops::conv2d_forward(&x, &ConvWeights::new(w.clone(), None, cfg).unwrap()).unwrap();
        prop_assert!(unbiased.max_abs_diff(&sliced_conv(&x, &w, cfg)) < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..12, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let z = randn(&[rows, cols], seed);
        let p = ops::softmax(&z).unwrap();
        for r in p.data().chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v > 0.0));
        }
        let shifted = ops::softmax(&z.map(|v| v + shift)).unwrap();
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn bn_train_output_is_standardized(n in 2usize..5, c in 1usize..4, hw in 1usize..5, seed in any::<u64>()) {
        let x = randn(&[n, c, hw, hw], seed).map(|v| 3.0 * v + 1.5);
        let mut bn = BatchNormState::<f64>::new(c).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let plane = hw * hw;
        let count = (n * plane) as f64;
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|i| y.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / count;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / count;
            prop_assert!(m.abs() < 1e-9);
            // eps keeps the variance slightly under one; it matters when the
            // batch variance itself is tiny.
            let xs: Vec<f64> = (0..n).flat_map(|i| x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].to_vec()).collect();
            let xm = xs.iter().sum::<f64>() / count;
            let xv = xs.iter().map(|a| (a - xm) * (a - xm)).sum::<f64>() / count;
            prop_assert!((v - xv / (xv + BN_EPS)).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_keep_one_and_eval_are_identity(len in 1usize..50, p in 0.05f64..1.0, seed in any::<u64>()) {
        let x = randn(&[len], seed);
        for (mode, keep) in [(Mode::Eval, p), (Mode::Train, 1.0)] {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let y = ops::dropout(&mut g, xn, keep, mode, &mut stream_rng(seed, 1)).unwrap();
            prop_assert_eq!(g.value(y).data(), x.data());
        }
    }
}

#[test]
fn channelwise_and_dense_extremes() {
    for (c, g) in [(6, 6), (6, 1), (8, 8)] {
        let cfg = ConvConfig::same(3, g);
        let x = randn(&[2, c, 5, 5], c as u64);
        let w = randn(&[c, c / g, 3, 3], 9);
        let got = ops::conv2d_forward(&x, &ConvWeights::new(w.clone(), None, cfg).unwrap()).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, None, cfg)) < 1e-10);
        assert!(got.max_abs_diff(&sliced_conv(&x, &w, cfg)) < 1e-10);
    }
}

#[test]
fn conv_rejects_indivisible_groups() {
    let w = Tensor::<f64>::zeros(&[6, 2, 3, 3]).unwrap();
    let err = ConvWeights::new(w, None, ConvConfig::same(3, 4)).unwrap_err();
    assert!(matches!(err, Error::GroupDivisibility { .. }), "{err}");
    assert_eq!(ops::count_conv_params(3, 16, 32, 4, false).unwrap(), 9 * 16 * 32 / 4);
    assert!(ops::count_conv_params(3, 16, 30, 4, false).is_err());
}

#[test]
fn grad_conv_grouped_with_bias() {
    for (g, stride, pad) in [(1, 1, 1), (2, 2, 1), (4, 1, 0)] {
        let cfg = ConvConfig { stride, padding: pad, groups: g };
        let inputs = [("x", randn(&[2, 4, 5, 5], 1)), ("w", randn(&[8, 4 / g, 3, 3], 2)), ("b", randn(&[8], 3))];
        let r = gradcheck_op(&inputs, 5, |gr, n| ops::conv2d(gr, n[0], n[1], Some(n[2]), cfg)).unwrap();
        assert_grad(&format!("conv g={g}"), r);
    }
}

#[test]
fn grad_relu() {
    let r = gradcheck_op(&[("x", randn(&[3, 7], 4))], 1, |g, n| Ok(ops::relu(g, n[0]))).unwrap();
    assert_grad("relu", r);
}

#[test]
fn grad_batch_norm_both_modes() {
    let inputs = [("x", randn(&[3, 2, 2, 2], 6)), ("gamma", randn(&[2], 7)), ("beta", randn(&[2], 8))];
    for mode in [Mode::Train, Mode::Eval] {
        let r = gradcheck_op(&inputs, 2, |g, n| {
            let mut rm = Tensor::from_f64(&[2], &[0.3, -0.2]).unwrap();
            let mut rv = Tensor::from_f64(&[2], &[1.5, 0.7]).unwrap();
            ops::batch_norm(g, n[0], n[1], n[2], &mut rm, &mut rv, BN_EPS, BN_MOMENTUM, mode)
        })
        .unwrap();
        assert_grad(&format!("bn {mode:?}"), r);
    }
}

#[test]
fn grad_dropout_with_fixed_mask() {
    let r = gradcheck_op(&[("x", randn(&[4, 6], 9))], 3, |g, n| {
        ops::dropout(g, n[0], 0.6, Mode::Train, &mut stream_rng(42, 0))
    })
    .unwrap();
    assert_grad("dropout", r);
}

#[test]
fn grad_pools_linear_and_merges() {
    let x = randn(&[2, 3, 6, 6], 10);
    let r = gradcheck_op(&[("x", x.clone())], 4, |g, n| ops::avg_pool2d(g, n[0], 2, 2)).unwrap();
    assert_grad("avg_pool 2/2", r);
    let r = gradcheck_op(&[("x", x.clone())], 4, |g, n| ops::avg_pool2d(g, n[0], 3, 2)).unwrap();
    assert_grad("avg_pool 3/2", r);
    let r = gradcheck_op(&[("x", x)], 4, |g, n| ops::global_avg_pool(g, n[0])).unwrap();
    assert_grad("global pool", r);

    let lin = [("x", randn(&[3, 5], 11)), ("w", randn(&[4, 5], 12)), ("b", randn(&[4], 13))];
    let r = gradcheck_op(&lin, 5, |g, n| ops::linear(g, n[0], n[1], n[2])).unwrap();
    assert_grad("linear", r);

    let pair = [("a", randn(&[2, 3, 2, 2], 14)), ("b", randn(&[2, 2, 2, 2], 15))];
    let r = gradcheck_op(&pair, 6, |g, n| ops::concat_channels(g, n[0], n[1])).unwrap();
    assert_grad("concat", r);

    let same = [("a", randn(&[2, 3], 16)), ("b", randn(&[2, 3], 17)), ("c", randn(&[2, 3], 18))];
    let r = gradcheck_op(&same, 7, |g, n| ops::elementwise_sum(g, n[0], n[1])).unwrap();
    assert_grad("sum", r);
    let r = gradcheck_op(&same, 7, ops::sum_many).unwrap();
    assert_grad("sum_many", r);
    let r = gradcheck_op(&same, 7, |g, n| ops::mul(g, n[0], n[2])).unwrap();
    assert_grad("mul", r);
}

#[test]
fn grad_softmax_cross_entropy() {
    let labels = [2, 0, 4];
    let r = gradcheck_op(&[("z", randn(&[3, 5], 19))], 8, |g, n| ops::softmax_cross_entropy(g, n[0], &labels)).unwrap();
    assert_grad("ce", r);
}

#[test]
fn cross_entropy_closed_form() {
    let z = randn(&[4, 3], 20);
    let labels = [0, 2, 1, 2];
    let mut g = Graph::new();
    let zn = g.variable(z.clone());
    let loss = ops::softmax_cross_entropy(&mut g, zn, &labels).unwrap();
    g.backward(loss).unwrap();
    let mut want_loss = 0.0;
    for (i, row) in z.data().chunks(3).enumerate() {
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want_loss += (lse - row[labels[i]]) / 4.0;
        for j in 0..3 {
            let p = (row[j] - lse).exp();
            let want = (p - if j == labels[i] { 1.0 } else { 0.0 }) / 4.0;
            assert!((g.grad(zn).unwrap().data()[i * 3 + j] - want).abs() < 1e-12);
        }
    }
    assert!((g.value(loss).item().unwrap() - want_loss).abs() < 1e-12);

    let mut g = Graph::new();
    let zn = g.variable(z);
    let err = ops::softmax_cross_entropy(&mut g, zn, &[0, 3, 1, 1]).unwrap_err();
    assert!(matches!(err, Error::LabelOutOfRange { .. }), "{err}");
}

#[test]
fn bn_running_statistics_follow_momentum() {
    let x = randn(&[4, 2, 3, 3], 21).map(|v| 2.0 * v - 1.0);
    let mut bn = BatchNormState::<f64>::new(2).unwrap();
    bn.forward(&x, Mode::Train).unwrap();
    let m = 36.0;
    for ch in 0..2 {
        let vals: Vec<f64> = (0..4).flat_map(|i| x.data()[(i * 2 + ch) * 9..(i * 2 + ch + 1) * 9].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let unbiased = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (m - 1.0);
        assert!((bn.running_mean.data()[ch] - (1.0 - BN_MOMENTUM) * mean).abs() < 1e-12);
        assert!((bn.running_var.data()[ch] - (BN_MOMENTUM + (1.0 - BN_MOMENTUM) * unbiased)).abs() < 1e-12);
    }

    // Eval uses the running values and leaves them alone.
    let before = (bn.running_mean.clone(), bn.running_var.clone());
    bn.gamma = Tensor::from_f64(&[2], &[2.0, 0.5]).unwrap();
    bn.beta = Tensor::from_f64(&[2], &[0.1, -0.3]).unwrap();
    let y = bn.forward(&x, Mode::Eval).unwrap();
    assert_eq!(bn.running_mean.data(), before.0.data());
    assert_eq!(bn.running_var.data(), before.1.data());
    for (i, (&xv, &yv)) in x.data().iter().zip(y.data()).enumerate() {
        let ch = (i / 9) % 2;
        let want = bn.gamma.data()[ch] * (xv - before.0.data()[ch]) / (before.1.data()[ch] + BN_EPS).sqrt() + bn.beta.data()[ch];
        assert!((yv - want).abs() < 1e-12);
    }
}

#[test]
fn dropout_monte_carlo() {
    let keep = 0.7;
    let x = Tensor::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
    let trials = 40_000;
    let mut sums = [0.0f64; 4];
    let mut zeros = 0usize;
    let mut rng = stream_rng(3, 0);
    for _ in 0..trials {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = ops::dropout(&mut g, xn, keep, Mode::Train, &mut rng).unwrap();
        for (s, &v) in sums.iter_mut().zip(g.value(y).data()) {
            *s += v;
            zeros += (v == 0.0) as usize;
        }
    }
    for (s, &want) in sums.iter().zip(x.data().iter()) {
        let want: f64 = want;
        let mean = s / trials as f64;
        // Standard error of the mean is |x|·sqrt((1-p)/p)/sqrt(trials) ≈ 0.0034·|x|.
        assert!((mean - want).abs() < 0.02 * want.abs().max(1.0), "{mean} vs {want}");
    }
    let frac = zeros as f64 / (4 * trials) as f64;
    assert!((frac - (1.0 - keep)).abs() < 0.01, "{frac}");
    let mut g = Graph::new();
    let xn = g.constant(x);
    assert!(ops::dropout(&mut g, xn, 0.0, Mode::Train, &mut rng).is_err());
    assert!(ops::dropout(&mut g, xn, 1.5, Mode::Train, &mut rng).is_err());
}

#[test]
fn pooling_against_brute_force() {
    let x = randn(&[2, 3, 7, 6], 22);
    for (k, s) in [(2, 2), (3, 2), (2, 1), (7, 1)] {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = ops::avg_pool2d(&mut g, xn, k, s);
        if k > 6 {
            assert!(y.is_err());
            continue;
        }
        let y = g.value(y.unwrap()).clone();
        let (oh, ow) = ((7 - k) / s + 1, (6 - k) / s + 1);
        assert_eq!(y.shape(), &[2, 3, oh, ow]);
        for p in 0..6 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += x.data()[p * 42 + (oy * s + dy) * 6 + ox * s + dx];
                        }
                    }
                    assert!((y.data()[(p * oh + oy) * ow + ox] - acc / (k * k) as f64).abs() < 1e-12);
                }
            }
        }
    }
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let y = ops::global_avg_pool(&mut g, xn).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3]);
    for p in 0..6 {
        let want = x.data()[p * 42..(p + 1) * 42].iter().sum::<f64>() / 42.0;
        assert!((g.value(y).data()[p] - want).abs() < 1e-12);
    }
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(randn(&[2, 3], 1));
    let b = g.constant(randn(&[3, 2], 2));
    assert!(matches!(ops::elementwise_sum(&mut g, a, b), Err(Error::ShapeMismatch { .. })));
    let bias = g.constant(randn(&[3], 3));
    assert!(ops::linear(&mut g, a, b, bias).is_err());
}
