use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vf_tensor::*;

fn t64(shape: &[usize], v: &[f64]) -> Tensor64 {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    let n = numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(out ⊙ r)` for a fixed random projection `r ∈ [0.5, 1.5]`, so every
/// output element contributes a distinct weight to the checked gradient.
fn projected(g: &mut Graph64, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let r = random(g.shape(out), &mut rng).map(|v| 1.0 + 0.5 * v);
    let r = g.constant(r);
    let m = g.mul(out, r)?;
    Ok(g.sum_all(m))
}

// ---------------------------------------------------------------- matmul

#[test]
fn matmul_identity_and_annihilation() {
    let mut g = Graph64::new();
    let i2 = g.constant(t64(&[2, 2], &[1., 0., 0., 1.]));
    let m = g.constant(t64(&[2, 2], &[1., 2., 3., 4.]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);

    let a = g.constant(t64(&[2, 2], &[1., 0., 0., 0.]));
    let b = g.constant(t64(&[2, 2], &[0., 0., 0., 1.]));
    let z = g.matmul(a, b).unwrap();
    assert_eq!(g.value(z).data(), &[0., 0., 0., 0.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph64::new();
    let a = g.constant(Tensor::zeros(&[3, 4]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[3, 4]") && msg.contains("[3, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
    let r = grad_check(
        "matmul",
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            projected(g, p, 1)
        },
        &inputs,
        1e-6,
    );
    assert!(r.passed, "{r}");
}

// ---------------------------------------------------------------- conv3d

#[test]
fn conv3d_identity_and_zero_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 1, 4, 5, 6], &mut rng);
    let mut g = Graph64::new();
    let xv = g.constant(x.clone());
    let w1 = g.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
    let b0 = g.constant(Tensor::zeros(&[1]));
    let y = g.conv3d(xv, w1, Some(b0), ConvGeom::unit()).unwrap();
    assert_eq!(g.value(y), &x);

    let w0 = g.constant(Tensor::zeros(&[2, 1, 3, 3, 3]));
    let b0 = g.constant(Tensor::zeros(&[2]));
    let y = g.conv3d(xv, w0, Some(b0), ConvGeom::same(3)).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv3d_output_extent_and_errors() {
    let mut g = Graph64::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 9, 8, 7]));
    let w = g.constant(Tensor::zeros(&[3, 2, 3, 3, 3]));
    let y = g.conv3d(x, w, None, ConvGeom::new([2, 2, 2], [1, 0, 1])).unwrap();
    // (9+2-3)/2+1 = 5, (8-3)/2+1 = 3, (7+2-3)/2+1 = 4
    assert_eq!(g.shape(y), &[1, 3, 5, 3, 4]);

    let big = g.constant(Tensor::zeros(&[1, 3, 1, 1, 1]));
    assert!(matches!(
        g.conv3d(x, big, None, ConvGeom::unit()),
        Err(TensorError::Shape { .. })
    ));
    let tiny = g.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
    assert!(matches!(
        g.conv3d(tiny, w, None, ConvGeom::unit()),
        Err(TensorError::Config { .. })
    ));
    assert!(matches!(
        g.conv3d(x, w, None, ConvGeom::new([0, 1, 1], [1; 3])),
        Err(TensorError::Config { .. })
    ));
}

#[test]
fn conv3d_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        random(&[1, 2, 5, 5, 5], &mut rng),
        random(&[2, 2, 3, 3, 3], &mut rng),
        random(&[2], &mut rng),
    ];
    let r = grad_check(
        "conv3d",
        |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), ConvGeom::same(3))?;
            projected(g, y, 3)
        },
        &inputs,
        1e-6,
    );
    assert!(r.passed, "{r}");

    let strided = grad_check(
        "conv3d stride 2",
        |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), ConvGeom::new([2; 3], [1; 3]))?;
            projected(g, y, 4)
        },
        &inputs,
        1e-6,
    );
    assert!(strided.passed, "{strided}");
}

// ---------------------------------------------------------------- upsample

#[test]
fn upsample_identity_and_nearest_replication() {
    let mut g = Graph64::new();
    let x = g.constant(t64(&[1, 1, 1, 1, 1], &[7.0]));
    assert_eq!(g.upsample(x, 1, UpsampleMode::Trilinear).unwrap(), x);
    let y = g.upsample(x, 2, UpsampleMode::Nearest).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 7.0));
    assert!("bicubic".parse::<UpsampleMode>().is_err());
    assert!(matches!(g.upsample(x, 0, UpsampleMode::Nearest), Err(TensorError::Config { .. })));
}

/// Direct evaluation of align-corners-false trilinear interpolation at one output voxel.
fn trilinear_oracle(x: &Tensor64, f: usize, o: [usize; 3]) -> f64 {
    let s = x.shape();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut w = [0f64; 3];
    for a in 0..3 {
        let src = ((o[a] as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let e = s[2 + a];
        lo[a] = (src.floor() as usize).min(e - 1);
        hi[a] = (lo[a] + 1).min(e - 1);
        w[a] = src - lo[a] as f64;
    }
    let mut acc = 0.0;
    for (bz, iz) in [(1.0 - w[0], lo[0]), (w[0], hi[0])] {
        for (by, iy) in [(1.0 - w[1], lo[1]), (w[1], hi[1])] {
            for (bx, ix) in [(1.0 - w[2], lo[2]), (w[2], hi[2])] {
                acc += bz * by * bx * x.at(&[0, 0, iz, iy, ix]);
            }
        }
    }
    acc
}

#[test]
fn trilinear_matches_pointwise_oracle_and_preserves_ramps() {
    // ramp along every axis: v = 2z + 3y - x + 1
    let (d, h, w) = (4, 3, 5);
    let mut vals = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                vals.push(2.0 * z as f64 + 3.0 * y as f64 - x as f64 + 1.0);
            }
        }
    }
    let x = t64(&[1, 1, d, h, w], &vals);
    let mut g = Graph64::new();
    let xv = g.constant(x.clone());
    let f = 2;
    let y = g.upsample(xv, f, UpsampleMode::Trilinear).unwrap();
    let yv = g.value(y);
    for oz in 0..d * f {
        for oy in 0..h * f {
            for ox in 0..w * f {
                let got = yv.at(&[0, 0, oz, oy, ox]);
                assert!((got - trilinear_oracle(&x, f, [oz, oy, ox])).abs() < 1e-12);
                // away from the clamped border the ramp is reproduced exactly
                let interior = |o: usize, e: usize| o >= 1 && o + 1 < e * f;
                if interior(oz, d) && interior(oy, h) && interior(ox, w) {
                    let src = |o: usize| (o as f64 + 0.5) / f as f64 - 0.5;
                    let want = 2.0 * src(oz) + 3.0 * src(oy) - src(ox) + 1.0;
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn upsample_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&[1, 2, 2, 3, 2], &mut rng)];
    for mode in [UpsampleMode::Nearest, UpsampleMode::Trilinear] {
        let r = grad_check(
            "upsample",
            |g, v| {
                let y = g.upsample(v[0], 3, mode)?;
                projected(g, y, 5)
            },
            &inputs,
            1e-6,
        );
        assert!(r.passed, "{mode:?} {r}");
    }
}

// ---------------------------------------------------------------- softmax

fn softmax_of(v: &[f64]) -> Vec<f64> {
    let mut g = Graph64::new();
    let x = g.constant(t64(&[v.len()], v));
    let y = g.softmax(x, 0).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn softmax_examples() {
    assert_eq!(softmax_of(&[0.0, 0.0]), vec![0.5, 0.5]);
    for p in softmax_of(&[3.3, 3.3, 3.3, 3.3]) {
        assert!((p - 0.25).abs() < 1e-15);
    }
    let p = softmax_of(&[3f64.ln(), 0.0]);
    assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_are_shift_invariant(
        vals in proptest::collection::vec(-1e3f64..1e3, 2..9),
        shift in -1e3f64..1e3,
    ) {
        let p = softmax_of(&vals);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let q = softmax_of(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_f32_is_stable_at_large_magnitudes(
        vals in proptest::collection::vec(-1e3f32..1e3, 2..6),
    ) {
        let mut g = Graph32::new();
        let n = vals.len();
        let x = g.constant(Tensor::new(&[1, n], vals).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let s: f32 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }
}

// ---------------------------------------------------------------- activations

fn act(kind: Activation, x: f64) -> f64 {
    let mut g = Graph64::new();
    let v = g.constant(Tensor::scalar(x));
    let y = g.activation(v, kind);
    g.value(y).item()
}

#[test]
fn activation_examples() {
    assert!((act(Activation::Softplus, 0.0) - 2f64.ln()).abs() < 1e-15);
    assert_eq!(act(Activation::Sigmoid, 0.0), 0.5);
    // softplus(20) = 20 + ln(1 + u), u = e^-20, via the series u - u²/2 + u³/3
    let u = (-20f64).exp();
    let oracle = 20.0 + (u - u * u / 2.0 + u * u * u / 3.0);
    let got = act(Activation::Softplus, 20.0);
    assert!((got - oracle).abs() <= 4.0 * f64::EPSILON * 20.0, "{got} vs {oracle}");
    assert!((got - 20.000_000_002).abs() < 1e-10);
    // no overflow far out
    assert_eq!(act(Activation::Softplus, 1e4), 1e4);
    assert!(act(Activation::Softplus, -800.0) >= 0.0);
    assert_eq!(act(Activation::Relu, -1.0), 0.0);
    assert_eq!(act(Activation::Neg, 2.0), -2.0);
    assert!((act(Activation::Exp, 1.0) - std::f64::consts::E).abs() < 1e-15);
    let s = act(Activation::Sigmoid, -40.0);
    assert!(s > 0.0 && s < 1e-17);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph64::new();
    let x = g.param(t64(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    let l = g.sum_all(y);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

// ---------------------------------------------------------------- reduce / concat

#[test]
fn reduce_examples_and_errors() {
    let mut g = Graph64::new();
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let s = g.sum_all(z);
    assert_eq!(g.value(s).item(), 0.0);
    let x = g.constant(t64(&[4], &[1., 2., 3., 4.]));
    let m = g.mean_all(x);
    assert_eq!(g.value(m).item(), 2.5);
    let c = g.constant(Tensor::full(&[2, 2, 2], -3.5));
    let mx = g.max(c, &[0, 1, 2], false).unwrap();
    assert_eq!(g.value(mx).item(), -3.5);
    assert!(matches!(g.sum(c, &[1, 1], false), Err(TensorError::Config { .. })));

    let y = g.constant(t64(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
    let keep = g.sum(y, &[1], true).unwrap();
    assert_eq!(g.shape(keep), &[2, 1]);
    assert_eq!(g.value(keep).data(), &[6., 15.]);
    let drop = g.mean(y, &[0], false).unwrap();
    assert_eq!(g.shape(drop), &[3]);
    assert_eq!(g.value(drop).data(), &[2.5, 3.5, 4.5]);
}

#[test]
fn concat_examples() {
    let mut g = Graph64::new();
    let a = g.constant(t64(&[1, 2], &[1., 2.]));
    assert_eq!(g.concat(&[a], 1).unwrap(), a);
    let b = g.constant(t64(&[1, 2], &[3., 4.]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.shape(c), &[1, 4]);
    assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    let bad = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.concat(&[a, bad], 1), Err(TensorError::Shape { .. })));
}

#[test]
fn concat_gradient_splits_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(&[2, 1, 3], &mut rng), random(&[2, 3, 3], &mut rng)];
    let r = grad_check(
        "concat",
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            projected(g, c, 7)
        },
        &inputs,
        1e-6,
    );
    assert!(r.passed, "{r}");
}

// ---------------------------------------------------------------- backward

#[test]
fn backward_examples() {
    let mut g = Graph64::new();
    let x = g.param(t64(&[2, 2], &[0.3, -4.0, 2.0, 9.0]));
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);

    let mut g = Graph64::new();
    let x = g.param(t64(&[2], &[1.0, 2.0]));
    let unused = g.param(t64(&[3], &[5.0, 5.0, 5.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum_all(sq);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 3]);

    // a second call accumulates
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());

    assert!(matches!(g.backward(sq), Err(TensorError::Usage(_))));
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut g = Graph64::new();
    let frozen = g.constant(t64(&[2], &[1.0, 2.0]));
    let live = g.param(t64(&[2], &[3.0, 4.0]));
    let p = g.mul(frozen, live).unwrap();
    let l = g.sum_all(p);
    g.backward(l).unwrap();
    assert!(g.grad(frozen).is_none());
    assert_eq!(g.grad(live).unwrap().data(), &[1.0, 2.0]);
}

// ---------------------------------------------------------------- grad_check

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = [random(&[3, 4], &mut rng)];
    let ident = grad_check("identity-sum", |g, v| Ok(g.sum_all(v[0])), &x, 1e-9);
    assert!(ident.passed && ident.max_relative_error < 1e-9, "{ident}");

    let sp = grad_check(
        "softplus-sum",
        |g, v| {
            let y = g.softplus(v[0]);
            Ok(g.sum_all(y))
        },
        &x,
        1e-7,
    );
    assert!(sp.passed, "{sp}");

    // x ⊙ detach(x): the tape sees only one factor, so the gradient is half the truth
    let wrong = grad_check(
        "detached-square",
        |g, v| {
            let c = g.detach(v[0]);
            let y = g.mul(v[0], c)?;
            Ok(g.sum_all(y))
        },
        &x,
        1e-5,
    );
    assert!(!wrong.passed);
    assert!(wrong.max_relative_error > 0.4);

    let nan = grad_check(
        "ln-negative",
        |g, v| {
            let y = g.ln(v[0]);
            Ok(g.sum_all(y))
        },
        &[t64(&[2], &[-1.0, 2.0])],
        1e-5,
    );
    assert!(!nan.passed && nan.diagnostic.is_some());
}

/// Every differentiable op, on random shapes, for 24 seeds.
#[test]
fn every_op_passes_gradcheck_on_random_shapes() {
    type OpFn = fn(&mut Graph64, &[Var], &[usize]) -> Result<Var>;
    let ops: Vec<(&str, usize, OpFn)> = vec![
        ("add", 2, |g, v, _| g.add(v[0], v[1])),
        ("sub", 2, |g, v, _| g.sub(v[0], v[1])),
        ("mul", 2, |g, v, _| g.mul(v[0], v[1])),
        ("div", 2, |g, v, _| {
            let d = g.square(v[1]);
            let d = g.add_scalar(d, 0.5);
            g.div(v[0], d)
        }),
        ("scalar", 1, |g, v, _| {
            let y = g.mul_scalar(v[0], -1.7);
            Ok(g.add_scalar(y, 0.3))
        }),
        ("exp", 1, |g, v, _| Ok(g.exp(v[0]))),
        ("ln", 1, |g, v, _| {
            let s = g.square(v[0]);
            let s = g.add_scalar(s, 0.2);
            Ok(g.ln(s))
        }),
        ("softplus", 1, |g, v, _| Ok(g.softplus(v[0]))),
        ("sigmoid", 1, |g, v, _| Ok(g.sigmoid(v[0]))),
        ("relu", 1, |g, v, _| Ok(g.relu(v[0]))),
        ("gelu", 1, |g, v, _| Ok(g.gelu(v[0]))),
        ("neg", 1, |g, v, _| Ok(g.neg(v[0]))),
        ("recip", 1, |g, v, _| {
            let s = g.square(v[0]);
            let s = g.add_scalar(s, 0.5);
            Ok(g.recip(s))
        }),
        ("lgamma+digamma", 1, |g, v, _| {
            let s = g.square(v[0]);
            let s = g.add_scalar(s, 1.0);
            let a = g.ln_gamma(s);
            let b = g.digamma(s);
            g.add(a, b)
        }),
        ("clamp", 1, |g, v, _| Ok(g.clamp(v[0], -0.5, 0.5))),
        ("sum-axes", 1, |g, v, s| g.sum(v[0], &[0, s.len() - 1], true)),
        ("mean-axes", 1, |g, v, _| g.mean(v[0], &[1], false)),
        ("max-axes", 1, |g, v, _| g.max(v[0], &[1], true)),
        ("expand", 1, |g, v, s| {
            let m = g.mean(v[0], &[1], true)?;
            g.expand(m, s)
        }),
        ("permute", 1, |g, v, s| {
            let perm: Vec<usize> = (0..s.len()).rev().collect();
            g.permute(v[0], &perm)
        }),
        ("narrow", 1, |g, v, s| g.narrow(v[0], 0, s[0] / 2, s[0] - s[0] / 2)),
        ("softmax", 1, |g, v, _| g.softmax(v[0], 1)),
        ("reshape", 1, |g, v, s| g.reshape(v[0], &[numel(s)])),
    ];
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = rng.random_range(2..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=4)).collect();
        let shape = {
            let mut s = shape;
            s[0] = s[0].max(2);
            s[1] = s[1].max(2);
            s
        };
        for (name, arity, f) in &ops {
            let inputs: Vec<Tensor64> = (0..*arity).map(|_| random(&shape, &mut rng)).collect();
            let shp = shape.clone();
            let r = grad_check(
                name,
                |g, v| {
                    let y = f(g, v, &shp)?;
                    projected(g, y, seed)
                },
                &inputs,
                1e-5,
            );
            assert!(r.passed, "seed {seed} shape {shape:?}: {r}");
        }

        // shape-specific ops
        let m = rng.random_range(1..5);
        let k = rng.random_range(1..5);
        let n = rng.random_range(1..5);
        let b = rng.random_range(1..3);
        let cases: Vec<(&str, Vec<Tensor64>, OpFn)> = vec![
            ("matmul", vec![random(&[m, k], &mut rng), random(&[k, n], &mut rng)], |g, v, _| g.matmul(v[0], v[1])),
            ("bmm", vec![random(&[b, m, k], &mut rng), random(&[b, k, n], &mut rng)], |g, v, _| g.bmm(v[0], v[1])),
            ("add_bias", vec![random(&[m, k, n], &mut rng), random(&[k], &mut rng)], |g, v, _| g.add_bias(v[0], v[1], 1)),
            ("layer_norm", vec![random(&[m, 4], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)], |g, v, _| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
            ("group_norm", vec![random(&[2, 4, 2, 2, 1], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)], |g, v, _| {
                g.group_norm(v[0], v[1], v[2], 2, 1e-5)
            }),
            ("conv3d", vec![random(&[b, 2, 3, 4, 3], &mut rng), random(&[2, 2, 3, 3, 3], &mut rng), random(&[2], &mut rng)], |g, v, _| {
                g.conv3d(v[0], v[1], Some(v[2]), ConvGeom::same(3))
            }),
            ("conv3d-1x1", vec![random(&[b, 3, 2, 2, 3], &mut rng), random(&[2, 3, 1, 1, 1], &mut rng), random(&[2], &mut rng)], |g, v, _| {
                g.conv3d(v[0], v[1], Some(v[2]), ConvGeom::unit())
            }),
            ("upsample-trilinear", vec![random(&[1, 2, 2, 2, 3], &mut rng)], |g, v, _| g.upsample(v[0], 2, UpsampleMode::Trilinear)),
            ("concat", vec![random(&[2, m, 3], &mut rng), random(&[2, k, 3], &mut rng)], |g, v, _| g.concat(&[v[0], v[1]], 1)),
        ];
        for (name, inputs, f) in cases {
            let r = grad_check(
                name,
                |g, v| {
                    let y = f(g, v, &[])?;
                    projected(g, y, seed)
                },
                &inputs,
                1e-5,
            );
            assert!(r.passed, "seed {seed}: {r}");
        }
    }
}

#[test]
fn forward_evaluation_is_bitwise_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph32::new();
        let x = g.constant(random(&[2, 3, 6, 6, 6], &mut rng).cast());
        let w = g.constant(random(&[4, 3, 3, 3, 3], &mut rng).cast());
        let y = g.conv3d(x, w, None, ConvGeom::same(3)).unwrap();
        let y = g.gelu(y);
        let y = g.softmax(y, 1).unwrap();
        let y = g.upsample(y, 2, UpsampleMode::Trilinear).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (build(), build());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn tensor_constructor_enforces_element_count() {
    assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
    let t = Tensor::<f64>::new(&[2, 3], vec![1.0; 6]).unwrap();
    assert_eq!(t.numel(), 6);
}
