mod common;

use common::{maxpool_ref, random_tensor, rng};
use proptest::prelude::*;
use rand::Rng;
use saccade::autodiff::{maxpool3x3_same, sigmoid, Graph, Tensor};

fn conv_value(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(Tensor::zeros(&[w.shape()[0]]));
    let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_full_overlap_of_ones() {
    let y = conv_value(&Tensor::full(&[1, 3, 3], 1.0), &Tensor::full(&[1, 1, 3, 3], 1.0), 1, 1);
    assert_eq!(y.shape(), &[1, 3, 3]);
    assert_eq!(y.at3(0, 1, 1), 9.0);
    assert_eq!(y.at3(0, 0, 0), 4.0);
}

#[test]
fn conv_1x1_scales() {
    let x = random_tensor(&[1, 5, 4], &mut rng(1));
    let y = conv_value(&x, &Tensor::full(&[1, 1, 1, 1], 2.0), 1, 0);
    for (a, b) in x.data().iter().zip(y.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("conv2d"), "{err}");
}

/// Direct-summation cross-correlation.
fn conv_ref(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = x.dims3().unwrap();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn3([co, ho, wo], |o, y, xo| {
        let mut s = 0.0;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as i64 - pad as i64;
                    let ix = (xo * stride + kx) as i64 - pad as i64;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        s += x.at3(ci, iy as usize, ix as usize) * w.data()[((o * c + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        s
    })
}

#[test]
fn conv_matches_direct_summation() {
    let mut r = rng(2);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (3, 1, 0), (1, 2, 0)] {
        let x = random_tensor(&[3, 9, 7], &mut r);
        let w = random_tensor(&[4, 3, k, k], &mut r);
        let got = conv_value(&x, &w, stride, pad);
        let want = conv_ref(&x, &w, stride, pad);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12, "k{k} s{stride} p{pad}: {a} vs {b}");
        }
    }
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let n = g.constant(Tensor::full(&[2, 2], -3.0));
    let z = g.relu(n);
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_is_positive_indicator() {
    let mut g = Graph::new();
    let x = random_tensor(&[50], &mut rng(3));
    let xv = g.param(x.clone());
    let y = g.relu(xv);
    let s = g.sum(y);
    g.backward(s).unwrap();
    let grad = g.grad(xv).unwrap();
    for (v, d) in x.data().iter().zip(grad.data()) {
        assert_eq!(*d, if *v > 0.0 { 1.0 } else { 0.0 });
    }
}

#[test]
fn sigmoid_is_stable() {
    assert_eq!(sigmoid(0.0), 0.5);
    for x in [-1000.0, -745.0, -50.0] {
        let s = sigmoid(x);
        assert!(s.is_finite() && (0.0..1e-20).contains(&s), "{x} -> {s}");
    }
    assert!(sigmoid(-30.0) > 0.0);
    assert_eq!(sigmoid(1000.0), 1.0);
}

#[test]
fn upsample_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 1], vec![5.0]).unwrap());
    let y = g.upsample_nearest2x(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 5.0));

    let c = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let u = g.upsample_nearest2x(c).unwrap();
    let u = g.value(u);
    for y in 0..4 {
        for x in 0..4 {
            let want = if (y / 2 + x / 2) % 2 == 0 { 1.0 } else { 0.0 };
            assert_eq!(u.at3(0, y, x), want);
        }
    }
}

#[test]
fn upsample_backward_sums_blocks() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[1, 2, 2]));
    let y = g.upsample_nearest2x(x).unwrap();
    let w = Tensor::from_fn3([1, 4, 4], |_, y, x| (y * 4 + x) as f64);
    let wv = g.constant(w);
    let m = common_mul(&mut g, y, wv);
    g.backward(m).unwrap();
    // block (0,0) covers 0+1+4+5
    assert_eq!(g.grad(x).unwrap().data(), &[10.0, 18.0, 42.0, 50.0]);
}

/// sum(a * b) for a constant `b`, via the weighted-sum helper.
fn common_mul(g: &mut Graph, a: saccade::autodiff::Var, b: saccade::autodiff::Var) -> saccade::autodiff::Var {
    let weights = g.value(b).clone();
    saccade::autodiff::gradcheck::weighted_sum(g, a, &weights).unwrap()
}

#[test]
fn bilinear_grid_point_and_affine_field() {
    let f = Tensor::from_fn3([2, 6, 5], |c, y, x| if c == 0 { x as f64 + 2.0 * y as f64 } else { (x * y) as f64 });
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let s = g.bilinear_sample(fv, &[(2.0, 3.0), (1.5, 2.25)]).unwrap();
    let v = g.value(s);
    assert_eq!(v.shape(), &[2, 2]);
    assert_eq!(v.data()[0], f.at3(0, 3, 2));
    assert_eq!(v.data()[1], f.at3(1, 3, 2));
    assert!((v.data()[2] - 6.0).abs() < 1e-12);
}

#[test]
fn bilinear_empty_points() {
    let mut g = Graph::new();
    let fv = g.constant(Tensor::zeros(&[3, 4, 4]));
    let s = g.bilinear_sample(fv, &[]).unwrap();
    assert_eq!(g.value(s).len(), 0);
}

#[test]
fn bilinear_clamps_out_of_range() {
    let f = Tensor::from_fn3([1, 4, 4], |_, y, x| (y * 4 + x) as f64);
    let mut g = Graph::new();
    let fv = g.constant(f);
    let s = g.bilinear_sample(fv, &[(-3.0, -1.0), (10.0, 7.5)]).unwrap();
    assert_eq!(g.value(s).data(), &[0.0, 15.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bilinear_exact_on_bilinear_fields(
        a in -3.0..3.0f64, b in -3.0..3.0f64, c in -1.0..1.0f64, d in -5.0..5.0f64,
        pts in prop::collection::vec((0.0..6.0f64, 0.0..4.0f64), 1..20),
    ) {
        let f = Tensor::from_fn3([1, 5, 7], |_, y, x| a * x as f64 + b * y as f64 + c * (x * y) as f64 + d);
        let mut g = Graph::new();
        let fv = g.constant(f);
        let s = g.bilinear_sample(fv, &pts).unwrap();
        for (i, (x, y)) in pts.iter().enumerate() {
            let want = a * x + b * y + c * x * y + d;
            prop_assert!((g.value(s).data()[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..1000, a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let mut r = rng(seed);
        let x = random_tensor(&[2, 6, 6], &mut r);
        let y = random_tensor(&[2, 6, 6], &mut r);
        let w = random_tensor(&[3, 2, 3, 3], &mut r);
        let stride = if seed % 2 == 0 { 1 } else { 2 };
        let mix = Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv_value(&mix, &w, stride, 1);
        let cx = conv_value(&x, &w, stride, 1);
        let cy = conv_value(&y, &w, stride, 1);
        for i in 0..lhs.len() {
            prop_assert!((lhs.data()[i] - (a * cx.data()[i] + b * cy.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn maxpool_matches_brute_force(seed in 0u64..10_000, c in 1usize..4, h in 1usize..10, w in 1usize..10) {
        let mut r = rng(seed);
        // coarse values so ties are common
        let x = Tensor::from_fn3([c, h, w], |_, _, _| r.random_range(0..5) as f64);
        let got = maxpool3x3_same(&x);
        let want = maxpool_ref(&x);
        prop_assert_eq!(got.data(), want.data());
        prop_assert!(got.data().iter().zip(x.data()).all(|(p, v)| p >= v));
    }

    #[test]
    fn sigmoid_in_open_unit_interval(x in -30.0..30.0f64) {
        let s = sigmoid(x);
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert!((sigmoid(-x) - (1.0 - s)).abs() < 1e-15);
    }
}

#[test]
fn maxpool_examples() {
    let mut x = Tensor::zeros(&[1, 5, 5]);
    x.set3(0, 2, 2, 3.0);
    let p = maxpool3x3_same(&x);
    for y in 0..5usize {
        for xi in 0..5usize {
            let near = y.abs_diff(2usize) <= 1 && xi.abs_diff(2usize) <= 1;
            assert_eq!(p.at3(0, y, xi), if near { 3.0 } else { 0.0 });
        }
    }
    let c = Tensor::full(&[2, 4, 3], 0.7);
    assert_eq!(maxpool3x3_same(&c), c);
}

#[test]
fn maxpool_idempotent_on_fixed_points() {
    // Every cell must dominate its neighbours, so fixed points are exactly
    // the per-channel constant maps.
    let mut r = rng(9);
    for _ in 0..20 {
        let levels: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_fn3([3, 6, 5], |c, _, _| levels[c]);
        let p = maxpool3x3_same(&x);
        assert_eq!(p, x);
        assert_eq!(maxpool3x3_same(&p), x);
    }
    let mut x = Tensor::full(&[1, 4, 4], 0.0);
    x.set3(0, 1, 1, 1.0);
    assert_ne!(maxpool3x3_same(&x), x);
}

#[test]
fn backward_sum_gives_ones_and_independent_gives_zeros() {
    let mut g = Graph::new();
    let w = g.param(random_tensor(&[3, 2], &mut rng(4)));
    let other = g.param(Tensor::full(&[4], 1.0));
    let s = g.sum(w);
    g.backward(s).unwrap();
    assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 1.0));
    let og = g.grad(other).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; 4]);
    assert!(og.iter().all(|&v| v == 0.0));
}

#[test]
fn backward_accumulates_until_reset() {
    let mut g = Graph::new();
    let w = g.param(Tensor::full(&[2], 1.0));
    let s = g.sum(w);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0]);
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let w = g.param(Tensor::full(&[2], 1.0));
    let y = g.relu(w);
    assert!(g.backward(y).is_err());
}
