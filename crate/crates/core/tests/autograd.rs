mod common;

use common::{max_grad_error, randn, weighted_sum};
use duostream_core::graph::{gelu_scalar, LAYER_NORM_EPS};
use duostream_core::{BatchNormOptions, Error, Graph, NormMode, RunningStats, Tensor, Var};
use proptest::prelude::*;

const H: f64 = 1e-5;

fn ones(shape: &[usize]) -> Tensor {
    Tensor::full(shape.to_vec(), 1.0)
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = Graph::new();
    let x = g.constant(ones(&[1, 1, 3, 3]));
    let w = g.constant(ones(&[1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn conv2d_sum_of_ones() {
    let mut g = Graph::new();
    let x = g.constant(ones(&[1, 1, 5, 5]));
    let w = g.constant(ones(&[1, 1, 3, 3]));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv2d_gradient_of_sum_matches_finite_differences() {
    let inputs = [randn(&[2, 3, 8, 8], 1), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)];
    let err = max_grad_error(&inputs, H, 1e-6, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        g.sum(y).unwrap()
    });
    assert!(err < 1e-6, "conv2d relative error {err:e}");
}

#[test]
fn conv2d_rejects_bad_configuration() {
    let mut g = Graph::new();
    let x = g.constant(ones(&[1, 2, 4, 4]));
    let w = g.constant(ones(&[1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Config(_))));
    let w = g.constant(ones(&[1, 2, 7, 7]));
    assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Config(_))));
}

#[test]
fn depthwise_center_tap_is_identity() {
    let mut kernel = Tensor::zeros([3, 1, 3, 3]);
    for c in 0..3 {
        kernel.data_mut()[c * 9 + 4] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.constant(randn(&[2, 3, 5, 6], 4));
    let w = g.constant(kernel);
    let y = g.depthwise_conv2d(x, w, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn depthwise_channels_are_independent() {
    let x = randn(&[1, 4, 6, 6], 5);
    let w = randn(&[4, 1, 3, 3], 6);
    let run = |x: Tensor| {
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.constant(w.clone()));
        let y = g.depthwise_conv2d(xv, wv, 1, 1).unwrap();
        g.value(y).data().to_vec()
    };
    let base = run(x.clone());
    let mut bumped = x;
    bumped.data_mut()[7] += 3.0;
    let moved = run(bumped);
    assert_ne!(base[..36], moved[..36]);
    assert_eq!(base[36..], moved[36..]);
}

#[test]
fn depthwise_gradient_check() {
    let inputs = [randn(&[2, 3, 7, 7], 7), randn(&[3, 1, 3, 3], 8)];
    let err = max_grad_error(&inputs, H, 1e-6, |g, v| {
        let y = g.depthwise_conv2d(v[0], v[1], 2, 1).unwrap();
        weighted_sum(g, y, 9)
    });
    assert!(err < 1e-6, "depthwise relative error {err:e}");
}

#[test]
fn linear_identity_and_bias() {
    let mut eye = Tensor::zeros([3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 4] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.constant(randn(&[2, 4, 3], 10));
    let w = g.constant(eye);
    let zero = g.constant(Tensor::zeros([3]));
    let y = g.linear(x, w, Some(zero)).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let xz = g.constant(Tensor::zeros([5, 3]));
    let b = g.constant(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let w2 = g.constant(randn(&[3, 3], 11));
    let y = g.linear(xz, w2, Some(b)).unwrap();
    for row in g.value(y).data().chunks(3) {
        assert_eq!(row, &[1.0, -2.0, 0.5]);
    }
}

#[test]
fn linear_gradient_check() {
    let inputs = [randn(&[3, 2, 5], 12), randn(&[4, 5], 13), randn(&[4], 14)];
    let err = max_grad_error(&inputs, H, 1e-6, |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        weighted_sum(g, y, 15)
    });
    assert!(err < 1e-6, "linear relative error {err:e}");
}

#[test]
fn matmul_identity_and_concat() {
    let mut eye = Tensor::zeros([4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    let mut g = Graph::new();
    let a = g.constant(randn(&[3, 4], 16));
    let i = g.constant(eye);
    let y = g.matmul(a, i).unwrap();
    assert_eq!(g.value(y).data(), g.value(a).data());

    let a = g.constant(randn(&[2, 3], 17));
    let b = g.constant(randn(&[2, 5], 18));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[2, 8]);
    let cv = g.value(c).clone();
    for r in 0..2 {
        assert_eq!(&cv.data()[r * 8..r * 8 + 3], &g.value(a).data()[r * 3..r * 3 + 3]);
        assert_eq!(&cv.data()[r * 8 + 3..r * 8 + 8], &g.value(b).data()[r * 5..r * 5 + 5]);
    }
}

#[test]
fn chained_matmul_mean_gradient_check() {
    let inputs = [randn(&[2, 3, 4], 19), randn(&[2, 4, 5], 20)];
    let err = max_grad_error(&inputs, H, 1e-6, |g, v| {
        let t = g.transpose(v[1]).unwrap();
        let t = g.transpose(t).unwrap();
        let y = g.matmul(v[0], t).unwrap();
        let m = g.mean(y, 1).unwrap();
        weighted_sum(g, m, 21)
    });
    assert!(err < 1e-6, "matmul/mean relative error {err:e}");
}

#[test]
fn shape_ops_gradient_check() {
    let inputs = [randn(&[2, 3, 4], 22), randn(&[2, 3, 2], 23), randn(&[6], 24)];
    let err = max_grad_error(&inputs, H, 1e-6, |g, v| {
        let p = g.permute(v[0], &[2, 0, 1]).unwrap();
        let r = g.reshape(p, &[4, 6]).unwrap();
        let r = g.transpose(r).unwrap();
        let r = g.reshape(r, &[2, 3, 4]).unwrap();
        let c = g.concat(&[r, v[1]], 2).unwrap();
        let s = g.scale(c, 0.7).unwrap();
        let rows = g.reshape(s, &[6, 6]).unwrap();
        let added = g.add(rows, v[2]).unwrap();
        let m = g.mean(added, 0).unwrap();
        weighted_sum(g, m, 25)
    });
    assert!(err < 1e-6, "shape ops relative error {err:e}");
}

#[test]
fn gelu_values() {
    assert_eq!(gelu_scalar(0.0), 0.0);
    assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    assert!(gelu_scalar(-10.0).abs() < 1e-6);
    // 1·Φ(1), Φ(1) = 0.841344746068543 (tabulated standard normal CDF).
    assert!((gelu_scalar(1.0) - 0.841345).abs() < 1e-5);
    assert!((gelu_scalar(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
}

#[test]
fn softmax_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([3]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::full([2], 1000.0));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let base = randn(&[4, 7], 26);
    let shifted = Tensor::new([4, 7], base.data().iter().map(|v| v + 37.5).collect()).unwrap();
    let (a, b) = (g.constant(base), g.constant(shifted));
    let (ya, yb) = (g.softmax(a, 1).unwrap(), g.softmax(b, 1).unwrap());
    for (p, q) in g.value(ya).data().iter().zip(g.value(yb).data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient_check_any_axis() {
    for axis in 0..3 {
        let inputs = [randn(&[3, 4, 5], 27 + axis as u64)];
        let err = max_grad_error(&inputs, H, 1e-6, |g, v| {
            let y = g.softmax(v[0], axis).unwrap();
            weighted_sum(g, y, 30)
        });
        assert!(err < 1e-6, "softmax axis {axis} relative error {err:e}");
    }
}

#[test]
fn layer_norm_statistics() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::full([6], 1.0));
    let beta = g.constant(Tensor::zeros([6]));
    let x = g.constant(Tensor::full([2, 6], 3.25));
    let y = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let gam = Tensor::new([6], vec![2.0, 2.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
    let bet = Tensor::full([6], 0.5);
    let (gamma, beta) = (g.constant(gam), g.constant(bet));
    let x = g.constant(randn(&[5, 6], 31));
    let y = g.layer_norm(x, gamma, beta, LAYER_NORM_EPS).unwrap();
    for row in g.value(y).data().chunks(6) {
        let mean = row.iter().sum::<f64>() / 6.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!((mean - 0.5).abs() < 1e-6);
        assert!((var - 4.0).abs() < 1e-5 * 4.0, "var {var}");
    }
}

#[test]
fn layer_norm_gradient_check() {
    let inputs = [randn(&[3, 2, 6], 32), randn(&[6], 33), randn(&[6], 34)];
    let err = max_grad_error(&inputs, H, 1e-6, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap();
        weighted_sum(g, y, 35)
    });
    assert!(err < 1e-5, "layer_norm relative error {err:e}");
}

#[test]
fn batch_norm_eval_identity_and_train_statistics() {
    let opts = BatchNormOptions::default();
    let mut g = Graph::new();
    let x = g.constant(randn(&[2, 3, 4, 4], 36));
    let gamma = g.constant(Tensor::full([3], 1.0));
    let beta = g.constant(Tensor::zeros([3]));
    let mut stats = RunningStats::new(3);
    let y = g.batch_norm(x, gamma, beta, &mut stats, NormMode::Eval, opts).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
        assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
    }
    assert_eq!(stats, RunningStats::new(3));

    let y = g.batch_norm(x, gamma, beta, &mut stats, NormMode::Train, opts).unwrap();
    let yv = g.value(y);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| yv.data()[(n * 3 + ch) * 16..(n * 3 + ch + 1) * 16].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 32.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
    assert_ne!(stats, RunningStats::new(3));
}

#[test]
fn batch_norm_train_variance_is_eps_limited() {
    // var/(var+eps) is the exact post-norm variance; check to 1e-6.
    let mut g = Graph::new();
    let xt = randn(&[4, 2, 3, 3], 37);
    let x = g.constant(xt.clone());
    let gamma = g.constant(Tensor::full([2], 1.0));
    let beta = g.constant(Tensor::zeros([2]));
    let mut stats = RunningStats::new(2);
    let opts = BatchNormOptions::default();
    let y = g.batch_norm(x, gamma, beta, &mut stats, NormMode::Train, opts).unwrap();
    for ch in 0..2 {
        let pick = |t: &Tensor| -> Vec<f64> { (0..4).flat_map(|n| t.data()[(n * 2 + ch) * 9..(n * 2 + ch + 1) * 9].to_vec()).collect() };
        let stat = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64)
        };
        let (_, in_var) = stat(&pick(&xt));
        let (mean, var) = stat(&pick(g.value(y)));
        assert!(mean.abs() < 1e-12);
        assert!((var - in_var / (in_var + opts.eps)).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_degenerate_batch_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(ones(&[1, 2, 1, 1]));
    let gamma = g.constant(Tensor::full([2], 1.0));
    let beta = g.constant(Tensor::zeros([2]));
    let mut stats = RunningStats::new(2);
    let r = g.batch_norm(x, gamma, beta, &mut stats, NormMode::Train, BatchNormOptions::default());
    assert!(matches!(r, Err(Error::Config(_))));
    assert!(g.batch_norm(x, gamma, beta, &mut stats, NormMode::Eval, BatchNormOptions::default()).is_ok());
}

#[test]
fn batch_norm_gradient_check_both_modes() {
    for mode in [NormMode::Train, NormMode::Eval] {
        let inputs = [randn(&[3, 2, 3, 3], 38), randn(&[2], 39), randn(&[2], 40)];
        let err = max_grad_error(&inputs, H, 1e-6, |g, v| {
            let mut stats = RunningStats { mean: vec![0.3, -0.2], var: vec![1.5, 0.7] };
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode, BatchNormOptions::default()).unwrap();
            weighted_sum(g, y, 41)
        });
        assert!(err < 1e-5, "batch_norm {mode:?} relative error {err:e}");
    }
}

#[test]
fn cross_entropy_values_and_gradient() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros([3, 5]));
    let l = g.cross_entropy(z, &[0, 2, 4]).unwrap();
    assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
    assert!((g.value(l).item() - 1.609438).abs() < 1e-6);

    let mut conf = Tensor::zeros([1, 5]);
    conf.data_mut()[3] = 50.0;
    let z = g.constant(conf);
    let l = g.cross_entropy(z, &[3]).unwrap();
    assert!(g.value(l).item() < 1e-6);

    // Closed form (softmax − onehot)/N.
    let logits = randn(&[4, 5], 42);
    let labels = [1usize, 0, 4, 2];
    let mut g = Graph::new();
    let z = g.variable(logits.clone());
    let l = g.cross_entropy(z, &labels).unwrap();
    g.backward(l).unwrap();
    let grad = g.grad(z).unwrap();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * 5..(r + 1) * 5];
        let zsum: f64 = row.iter().map(|v| v.exp()).sum();
        for k in 0..5 {
            let expected = (row[k].exp() / zsum - if k == label { 1.0 } else { 0.0 }) / 4.0;
            assert!((grad[r * 5 + k] - expected).abs() < 1e-14);
        }
    }
    let err = max_grad_error(&[logits], H, 1e-6, |g, v| g.cross_entropy(v[0], &labels).unwrap());
    assert!(err < 1e-6, "cross_entropy relative error {err:e}");
}

#[test]
fn gather_gradient_check() {
    let index = [0usize, 3, 3, 1, 2, 0];
    let err = max_grad_error(&[randn(&[2, 4], 43)], H, 1e-6, |g, v| {
        let y = g.gather(v[0], &index, &[2, 3]).unwrap();
        weighted_sum(g, y, 44)
    });
    assert!(err < 1e-6, "gather relative error {err:e}");
}

#[test]
fn backward_basics_and_accumulation() {
    let mut g = Graph::new();
    let x = g.variable(randn(&[2, 3, 2], 45));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 2.0));
    g.zero_grad();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 0.0));

    let mut g = Graph::new();
    let xt = randn(&[4, 3], 46);
    let yt = randn(&[4, 3], 47);
    let x = g.variable(xt);
    let y = g.constant(yt.clone());
    let p = g.mul(x, y).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), yt.data());
    assert!(g.grad(y).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.variable(randn(&[3], 48));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full([2], 1e300));
    assert!(matches!(g.scale(x, 1e300), Err(Error::Numerical(_))));
}

/// Ten seeds per differentiable op at the invariant tolerance.
#[test]
fn every_op_passes_gradient_checks_over_ten_seeds() {
    type Build = fn(&mut Graph, &[Var]) -> Var;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("conv2d", vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
            weighted_sum(g, y, 1)
        }),
        ("depthwise", vec![vec![1, 2, 4, 4], vec![2, 1, 2, 2]], |g, v| {
            let y = g.depthwise_conv2d(v[0], v[1], 2, 0).unwrap();
            weighted_sum(g, y, 2)
        }),
        ("linear", vec![vec![3, 4], vec![2, 4], vec![2]], |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            weighted_sum(g, y, 3)
        }),
        ("matmul", vec![vec![2, 3], vec![3, 2]], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, y, 4)
        }),
        ("gelu", vec![vec![10]], |g, v| {
            let y = g.gelu(v[0]).unwrap();
            weighted_sum(g, y, 5)
        }),
        ("softmax", vec![vec![2, 5]], |g, v| {
            let y = g.softmax(v[0], 1).unwrap();
            weighted_sum(g, y, 6)
        }),
        ("layer_norm", vec![vec![2, 5], vec![5], vec![5]], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS).unwrap();
            weighted_sum(g, y, 7)
        }),
        ("batch_norm", vec![vec![2, 2, 2, 2], vec![2], vec![2]], |g, v| {
            let mut stats = RunningStats::new(2);
            let y = g
                .batch_norm(v[0], v[1], v[2], &mut stats, NormMode::Train, BatchNormOptions::default())
                .unwrap();
            weighted_sum(g, y, 8)
        }),
        ("cross_entropy", vec![vec![3, 5]], |g, v| g.cross_entropy(v[0], &[0, 4, 2]).unwrap()),
        ("mean_add", vec![vec![2, 3], vec![3]], |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let m = g.mean(a, 0).unwrap();
            weighted_sum(g, m, 9)
        }),
    ];
    for (name, shapes, build) in cases {
        for seed in 0..10u64 {
            let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| randn(s, seed * 100 + i as u64)).collect();
            let err = max_grad_error(&inputs, H, 1e-6, build);
            assert!(err < 1e-4, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::new();
        let x = g.variable(randn(&[2, 3, 6, 6], 50));
        let w = g.variable(randn(&[4, 3, 3, 3], 51));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.gelu(y).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let l = weighted_sum(&mut g, y, 52);
        g.backward(l).unwrap();
        (g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec())
    };
    let (a, b) = (run(), run());
    assert!(a.0.iter().zip(&b.0).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(p, q)| p.to_bits() == q.to_bits()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 4], vals).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn same_padding_preserves_extent(k in prop::sample::select(vec![1usize, 3, 5, 7]), h in 1usize..9, w in 1usize..9) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 2, h, w], 0.5));
        let wt = g.constant(Tensor::full([3, 2, k, k], 0.1));
        let y = g.conv2d(x, wt, None, 1, (k - 1) / 2).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 3, h, w]);
        prop_assert!(g.value(y).is_finite());
    }

    #[test]
    fn forward_ops_stay_finite(vals in prop::collection::vec(-1e3f64..1e3, 16)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([1, 1, 4, 4], vals).unwrap());
        let gelu = g.gelu(x).unwrap();
        let s = g.softmax(gelu, 3).unwrap();
        let flat = g.reshape(x, &[4, 4]).unwrap();
        let gamma = g.constant(Tensor::full([4], 1.0));
        let beta = g.constant(Tensor::zeros([4]));
        let ln = g.layer_norm(flat, gamma, beta, LAYER_NORM_EPS).unwrap();
        let ce = g.cross_entropy(flat, &[0, 1, 2, 3]).unwrap();
        for v in [gelu, s, ln, ce] {
            prop_assert!(g.value(v).is_finite());
        }
    }
}
