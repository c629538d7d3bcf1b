use proptest::prelude::*;
use statrs::function::gamma::{digamma, ln_gamma};
use vf_core::config::{ClassWeightMode, LossConfig};
use vf_core::losses::{
    class_weights, combine, dice_loss, dirichlet_kl_uniform, evidential_kl_loss, kl_anneal, normalize_weights, one_hot,
    seg_loss, total_loss, wce_loss,
};
use vf_core::{Graph, Tensor, VfError};

type G = Graph<f64>;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

/// Independent closed form of KL(Dir(a) || Dir(1)).
fn kl_oracle(a: &[f64]) -> f64 {
    let s: f64 = a.iter().sum();
    let k = a.len() as f64;
    ln_gamma(s) - ln_gamma(k) - a.iter().map(|&x| ln_gamma(x)).sum::<f64>()
        + a.iter().map(|&x| (x - 1.0) * (digamma(x) - digamma(s))).sum::<f64>()
}

fn scalar(g: &G, v: vf_core::Var) -> f64 {
    g.value(v).data()[0]
}

fn two_class(labels: &[u8], dims: [usize; 3]) -> Tensor<f64> {
    one_hot(labels, 2, &dims).unwrap()
}

#[test]
fn dice_examples() {
    let y = two_class(&[1, 0, 1, 0, 0, 1, 1, 0], [2, 2, 2]);
    let mut g = G::new();
    let yv = g.constant(y.clone());
    let perfect = dice_loss(&mut g, yv, yv, 1e-5).unwrap();
    assert!(scalar(&g, perfect) <= 1e-5);

    let flipped: Vec<f64> = y.data().iter().map(|v| 1.0 - v).collect();
    let pv = g.constant(t(y.shape(), &flipped));
    let disjoint = dice_loss(&mut g, pv, yv, 1e-5).unwrap();
    assert!((scalar(&g, disjoint) - 1.0).abs() < 1e-5);

    // P = 0.5 everywhere, half foreground on 2³: per class (2·2 + s)/(4 + 4 + s).
    let half = g.constant(Tensor::full(y.shape(), 0.5));
    let d = dice_loss(&mut g, half, yv, 1e-5).unwrap();
    let s = 1e-5;
    let oracle = 1.0 - (2.0 * 2.0 + s) / (4.0 + 4.0 + s);
    assert!((scalar(&g, d) - oracle).abs() < 1e-15);
}

#[test]
fn wce_examples() {
    let y = two_class(&[1, 0, 0, 0, 1, 0, 0, 1], [2, 2, 2]);
    let mut g = G::new();
    let yv = g.constant(y.clone());
    let w = normalize_weights(&[1.0, 1.0]);
    let perfect = wce_loss(&mut g, yv, yv, &w).unwrap();
    assert!(scalar(&g, perfect) <= 1.7e-6);
    assert!(scalar(&g, perfect) >= 0.0);

    let half = g.constant(Tensor::full(y.shape(), 0.5));
    let l = wce_loss(&mut g, half, yv, &w).unwrap();
    assert!((scalar(&g, l) - std::f64::consts::LN_2).abs() < 1e-15);

    let p = g.constant(t(y.shape(), &[0.3, 0.6, 0.2, 0.9, 0.5, 0.4, 0.1, 0.8, 0.7, 0.4, 0.8, 0.1, 0.5, 0.6, 0.9, 0.2]));
    let a = wce_loss(&mut g, p, yv, &normalize_weights(&[0.4, 1.7])).unwrap();
    let b = wce_loss(&mut g, p, yv, &normalize_weights(&[0.8, 3.4])).unwrap();
    assert_eq!(scalar(&g, a), scalar(&g, b));
}

#[test]
fn seg_loss_endpoints_and_mix() {
    let y = two_class(&[1, 0, 0, 1, 1, 0, 0, 0], [2, 2, 2]);
    let mut g = G::new();
    let yv = g.constant(y.clone());
    let p = g.constant(t(y.shape(), &[0.2, 0.7, 0.6, 0.1, 0.3, 0.9, 0.5, 0.8, 0.8, 0.3, 0.4, 0.9, 0.7, 0.1, 0.5, 0.2]));
    let w = [0.5, 1.5];
    let d = dice_loss(&mut g, p, yv, 1e-5).unwrap();
    let c = wce_loss(&mut g, p, yv, &w).unwrap();
    for (gamma, expect) in [(1.0, scalar(&g, d)), (0.0, scalar(&g, c))] {
        let cfg = LossConfig { gamma, ..LossConfig::default() };
        let s = seg_loss(&mut g, p, yv, &w, &cfg).unwrap();
        assert!((scalar(&g, s.total) - expect).abs() < 1e-15);
    }
    let a = g.constant(t(&[1], &[0.2]));
    let b = g.constant(t(&[1], &[0.5]));
    let m = combine(&mut g, a, b, 0.6).unwrap();
    assert!((scalar(&g, m) - 0.32).abs() < 1e-15);
}

#[test]
fn kl_spot_values() {
    let mut g = G::new();
    let ones = g.constant(Tensor::ones(&[1, 2, 1, 1, 1]));
    let kl = dirichlet_kl_uniform(&mut g, ones).unwrap();
    assert_eq!(scalar(&g, kl), 0.0);

    // α = (2, 1) with the second class true: α̃ = (2, 1).
    let alpha = g.constant(t(&[1, 2, 1, 1, 1], &[2.0, 5.0]));
    let y = g.constant(t(&[1, 2, 1, 1, 1], &[0.0, 1.0]));
    let l = evidential_kl_loss(&mut g, alpha, y, 1.0).unwrap();
    let expect = std::f64::consts::LN_2 - 0.5;
    assert!((scalar(&g, l) - expect).abs() < 1e-9);
    assert!((kl_oracle(&[2.0, 1.0]) - expect).abs() < 1e-12);

    let zero = evidential_kl_loss(&mut g, alpha, y, 0.0).unwrap();
    assert_eq!(scalar(&g, zero), 0.0);
}

#[test]
fn kl_rejects_alpha_below_one() {
    let mut g = G::new();
    let alpha = g.constant(t(&[1, 2, 1, 1, 1], &[0.5, 2.0]));
    let y = g.constant(t(&[1, 2, 1, 1, 1], &[1.0, 0.0]));
    assert!(matches!(evidential_kl_loss(&mut g, alpha, y, 1.0), Err(VfError::Contract { .. })));
}

#[test]
fn anneal_schedule() {
    assert_eq!(kl_anneal(0, 15), 0.0);
    assert_eq!(kl_anneal(3, 15), 0.2);
    assert_eq!(kl_anneal(15, 15), 1.0);
    assert_eq!(kl_anneal(40, 15), 1.0);
}

#[test]
fn total_at_epoch_zero_is_segmentation_loss() {
    let y = two_class(&[1, 0, 0, 1, 0, 0, 0, 0], [2, 2, 2]);
    let mut g = G::new();
    let yv = g.constant(y.clone());
    let logits = g.constant(t(y.shape(), &[0.5, -1.0, 2.0, 0.1, -0.3, 0.8, 1.5, -2.0, 0.0, 0.4, -0.7, 1.1, 0.9, -1.2, 0.3, 0.6]));
    let p = g.softmax(logits, 1).unwrap();
    let alpha = g.softplus(logits);
    let alpha = g.add_scalar(alpha, 1.0);
    let cfg = LossConfig::default();
    let w = class_weights(&[1, 0, 0, 1, 0, 0, 0, 0], 2, ClassWeightMode::InverseFrequency);
    let terms = total_loss(&mut g, p, Some(alpha), yv, kl_anneal(0, 15), &w, &cfg).unwrap();
    let seg = seg_loss(&mut g, p, yv, &w, &cfg).unwrap();
    assert_eq!(scalar(&g, terms.total), scalar(&g, seg.total));
    assert_eq!(scalar(&g, terms.kl), 0.0);

    let terms = total_loss(&mut g, p, None, yv, 1.0, &w, &cfg).unwrap();
    assert_eq!(scalar(&g, terms.total), scalar(&g, seg.total));
}

#[test]
fn non_finite_total_is_reported() {
    let y = two_class(&[1, 0], [1, 1, 2]);
    let mut g = G::new();
    let yv = g.constant(y);
    let p = g.constant(t(&[1, 2, 1, 1, 2], &[f64::NAN, 0.5, 0.5, 0.5]));
    let r = total_loss(&mut g, p, None, yv, 0.0, &[1.0, 1.0], &LossConfig::default());
    assert!(matches!(r, Err(VfError::Numerical(_))));
}

#[test]
fn class_weights_clamp_and_normalize() {
    let w = class_weights(&[0; 100], 2, ClassWeightMode::InverseFrequency);
    // Background weight 1/(2·1) = 0.5, absent foreground gets the upper bound 10.
    assert!((w[0] - 0.5 / 5.25).abs() < 1e-15 && (w[1] - 10.0 / 5.25).abs() < 1e-15);
    let mut labels = vec![0u8; 1000];
    labels[0] = 1;
    let w = class_weights(&labels, 2, ClassWeightMode::InverseFrequency);
    assert!((w.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-15);
    assert!(w[1] > w[0]);
    assert_eq!(class_weights(&labels, 2, ClassWeightMode::Uniform), vec![1.0, 1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_nonnegative_and_matches_oracle(a in prop::collection::vec(1.0f64..30.0, 2..5)) {
        let k = a.len();
        let mut g = G::new();
        let alpha = g.constant(t(&[1, k, 1, 1, 1], &a));
        let kl = dirichlet_kl_uniform(&mut g, alpha).unwrap();
        let v = scalar(&g, kl);
        prop_assert!(v >= -1e-12);
        prop_assert!((v - kl_oracle(&a)).abs() < 1e-9 * (1.0 + v.abs()));
    }

    #[test]
    fn loss_ranges(logits in prop::collection::vec(-8.0f64..8.0, 16), labels in prop::collection::vec(0u8..2, 8)) {
        let mut g = G::new();
        let y = g.constant(two_class(&labels, [2, 2, 2]));
        let l = g.constant(t(&[1, 2, 2, 2, 2], &logits));
        let p = g.softmax(l, 1).unwrap();
        let w = class_weights(&labels, 2, ClassWeightMode::InverseFrequency);
        let d = dice_loss(&mut g, p, y, 1e-5).unwrap();
        let c = wce_loss(&mut g, p, y, &w).unwrap();
        prop_assert!(scalar(&g, d) >= 0.0 && scalar(&g, d) <= 1.0 + 1e-9);
        prop_assert!(scalar(&g, c) >= 0.0);
    }
}
