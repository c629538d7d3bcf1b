//! Registered finite-difference gradient checks for every differentiable
//! building block, run in `f64`.
//!
//! Non-scalar outputs are reduced with a fixed random projection
//! `sum(out ⊙ R)` so every output element contributes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vf_tensor::{grad_check, ConvGeom, GradReport, Graph, Tensor, TensorError, UpsampleMode, Var};

use crate::config::{CnnEncoderConfig, EurConfig, Interp, LossConfig, ViTConfig};
use crate::cvf::{fusion_weights, mix, reparameterize, Cvf, LatentEncoder, Noise};
use crate::encoders::{Age, CnnEncoder, PatchEmbed, VitBlock};
use crate::eur::{belief_from_logits, spatial_attention, Eur};
use crate::losses::{dice_loss, evidential_kl_loss, seg_loss, total_loss, wce_loss};
use crate::nn::{Bound, Builder, Conv, Init, ParamStore};

/// Tolerance for single operations and modules.
pub const TOL: f64 = 1e-5;
/// Tolerance for composite losses.
pub const TOL_LOSS: f64 = 1e-4;

type G = Graph<f64>;
type T64 = Tensor<f64>;

pub struct GradCase {
    pub name: &'static str,
    pub run: fn() -> GradReport,
}

fn lift(r: crate::Result<Var>) -> vf_tensor::Result<Var> {
    r.map_err(|e| match e {
        crate::VfError::Tensor(t) => t,
        e => TensorError::Usage(e.to_string()),
    })
}

fn random(shape: &[usize], seed: u64, scale: f64) -> T64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_f64(shape, &v).expect("shape and data agree")
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> T64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).expect("shape and data agree")
}

/// `sum(out ⊙ R)` with `R` drawn from a seed fixed per output shape.
fn project(g: &mut G, out: Var) -> vf_tensor::Result<Var> {
    let shape = g.shape(out).to_vec();
    let r = g.constant(random(&shape, 0x5eed ^ shape.iter().product::<usize>() as u64, 1.0));
    let m = g.mul(out, r)?;
    Ok(g.sum_all(m))
}

fn check_op(name: &str, inputs: &[T64], f: impl Fn(&mut G, &[Var]) -> vf_tensor::Result<Var>) -> GradReport {
    grad_check(name, |g, v| {
        let out = f(g, v)?;
        project(g, out)
    }, inputs, TOL)
}

/// Checks a module w.r.t. its data inputs and all its parameters.
fn check_module<M>(
    name: &str,
    tol: f64,
    build: impl FnOnce(&mut Builder<'_, f64>) -> M,
    data: &[T64],
    fwd: impl Fn(&M, &mut G, &Bound, &[Var]) -> crate::Result<Var>,
) -> GradReport {
    check_module_except(name, tol, build, data, &[], fwd)
}

/// As [`check_module`], holding the parameters named in `fixed` constant.
fn check_module_except<M>(
    name: &str,
    tol: f64,
    build: impl FnOnce(&mut Builder<'_, f64>) -> M,
    data: &[T64],
    fixed: &[&str],
    fwd: impl Fn(&M, &mut G, &Bound, &[Var]) -> crate::Result<Var>,
) -> GradReport {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let module = build(&mut Builder::new(&mut store, &mut rng));
    let ids: Vec<_> = store.ids().filter(|&id| !fixed.contains(&store.get(id).name.as_str())).collect();
    let mut inputs = data.to_vec();
    inputs.extend(ids.iter().map(|&id| store.get(id).value.clone()));
    let nd = data.len();
    grad_check(name, |g, v| {
        let mut p = store.bind(g, false);
        for (i, &id) in ids.iter().enumerate() {
            p.set(id, v[nd + i]);
        }
        let out = lift(fwd(&module, g, &p, &v[..nd]))?;
        project(g, out)
    }, &inputs, tol)
}

fn one_hot_2class(dims: [usize; 3], seed: u64) -> T64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.3) as u8).collect();
    crate::losses::one_hot(&labels, 2, &dims).expect("valid labels")
}

fn softmax_probs(seed: u64, dims: [usize; 3]) -> (T64, impl Fn(&mut G, Var) -> vf_tensor::Result<Var>) {
    let [d, h, w] = dims;
    (random(&[1, 2, d, h, w], seed, 1.0), |g: &mut G, x: Var| g.softmax(x, 1))
}

fn scalar_loss(name: &str, inputs: &[T64], f: impl Fn(&mut G, &[Var]) -> crate::Result<Var>) -> GradReport {
    grad_check(name, |g, v| {
        let l = lift(f(g, v))?;
        g.reshape(l, &[1])
    }, inputs, TOL_LOSS)
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "matmul", run: || check_op("matmul", &[random(&[3, 4], 1, 1.0), random(&[4, 2], 2, 1.0)], |g, v| g.matmul(v[0], v[1])) },
        GradCase { name: "bmm", run: || check_op("bmm", &[random(&[2, 3, 4], 3, 1.0), random(&[2, 4, 2], 4, 1.0)], |g, v| g.bmm(v[0], v[1])) },
        GradCase {
            name: "conv3d",
            run: || {
                let inputs = [random(&[1, 2, 5, 5, 5], 5, 1.0), random(&[2, 2, 3, 3, 3], 6, 0.3), random(&[2], 7, 0.1)];
                check_op("conv3d", &inputs, |g, v| g.conv3d(v[0], v[1], Some(v[2]), ConvGeom::same(3)))
            },
        },
        GradCase {
            name: "conv3d-strided",
            run: || {
                let inputs = [random(&[1, 2, 4, 4, 4], 8, 1.0), random(&[3, 2, 2, 2, 2], 9, 0.3)];
                check_op("conv3d-strided", &inputs, |g, v| g.conv3d(v[0], v[1], None, ConvGeom::new([2; 3], [0; 3])))
            },
        },
        GradCase { name: "softmax", run: || check_op("softmax", &[random(&[2, 3, 2, 2, 2], 10, 2.0)], |g, v| g.softmax(v[0], 1)) },
        GradCase { name: "softplus", run: || check_op("softplus", &[random(&[4, 5], 11, 3.0)], |g, v| Ok(g.softplus(v[0]))) },
        GradCase { name: "sigmoid", run: || check_op("sigmoid", &[random(&[4, 5], 12, 3.0)], |g, v| Ok(g.sigmoid(v[0]))) },
        GradCase { name: "gelu", run: || check_op("gelu", &[random(&[4, 5], 13, 2.0)], |g, v| Ok(g.gelu(v[0]))) },
        GradCase {
            name: "ln_gamma+digamma",
            run: || {
                check_op("ln_gamma+digamma", &[uniform(&[3, 4], 14, 0.5, 20.0)], |g, v| {
                    let a = g.ln_gamma(v[0]);
                    let b = g.digamma(v[0]);
                    g.add(a, b)
                })
            },
        },
        GradCase {
            name: "upsample-nearest",
            run: || check_op("upsample-nearest", &[random(&[1, 2, 2, 3, 2], 15, 1.0)], |g, v| g.upsample(v[0], 2, UpsampleMode::Nearest)),
        },
        GradCase {
            name: "upsample-trilinear",
            run: || check_op("upsample-trilinear", &[random(&[1, 2, 2, 3, 2], 16, 1.0)], |g, v| g.upsample(v[0], 2, UpsampleMode::Trilinear)),
        },
        GradCase {
            name: "concat",
            run: || check_op("concat", &[random(&[1, 2, 2, 2, 2], 17, 1.0), random(&[1, 3, 2, 2, 2], 18, 1.0)], |g, v| g.concat(&[v[0], v[1]], 1)),
        },
        GradCase {
            name: "group_norm",
            run: || {
                let inputs = [random(&[2, 4, 2, 2, 2], 19, 1.0), uniform(&[4], 20, 0.5, 1.5), random(&[4], 21, 0.2)];
                check_op("group_norm", &inputs, |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5))
            },
        },
        GradCase {
            name: "layer_norm",
            run: || {
                let inputs = [random(&[3, 6], 22, 1.0), uniform(&[6], 23, 0.5, 1.5), random(&[6], 24, 0.2)];
                check_op("layer_norm", &inputs, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
            },
        },
        GradCase {
            name: "vit-attention-block",
            run: || {
                // The key part of the qkv bias shifts every score row by a
                // constant, so its true gradient is zero and relative error is
                // meaningless there; the bias is held fixed.
                let x = [random(&[1, 4, 8], 25, 1.0)];
                check_module_except("vit-attention-block", TOL, |bd| VitBlock::new(bd, 8, 2, 2), &x, &["qkv.b"], |m, g, p, v| {
                    Ok(m.forward(g, p, v[0])?.0)
                })
            },
        },
        GradCase {
            name: "vit-patch-embed",
            run: || {
                let cfg = ViTConfig {
                    patch_size: 2,
                    embed_dim: 4,
                    ..ViTConfig::default()
                };
                // Positional embedding learned on a 2³ grid, resized to the 2×1×2 input grid.
                check_module("vit-patch-embed", TOL, |bd| PatchEmbed::new(bd, &cfg, 1, [4, 4, 4]), &[random(&[1, 1, 4, 2, 4], 26, 1.0)], |m, g, p, v| {
                    Ok(m.forward(g, p, v[0])?.0)
                })
            },
        },
        GradCase {
            name: "age",
            run: || {
                check_module("age", TOL, |bd| Age::new(bd, 4, 2, 3), &[random(&[1, 4, 3, 3, 3], 27, 1.0)], |m, g, p, v| {
                    Ok(m.forward(g, p, v[0])?.out)
                })
            },
        },
        GradCase {
            name: "cnn-encoder-2scale",
            run: || {
                let cfg = CnnEncoderConfig {
                    base_channels: 2,
                    num_scales: 2,
                    norm_groups: 1,
                };
                check_module("cnn-encoder-2scale", TOL, |bd| CnnEncoder::new(bd, &cfg, 1), &[random(&[1, 1, 4, 4, 4], 28, 1.0)], |m, g, p, v| {
                    let f = m.forward(g, p, v[0])?;
                    let a = g.sum_all(f[0]);
                    let b = project(g, f[1])?;
                    Ok(g.add(a, b)?)
                })
            },
        },
        GradCase {
            name: "cvf-latent-encoder",
            run: || {
                check_module("cvf-latent-encoder", TOL, |bd| LatentEncoder::new(bd, "e", 3, -1.0), &[random(&[1, 3, 2, 2, 2], 29, 1.0)], |m, g, p, v| {
                    let lat = m.encode(g, p, v[0])?;
                    Ok(g.concat(&[lat.mu, lat.sigma], 1)?)
                })
            },
        },
        GradCase {
            name: "cvf-reparameterize",
            run: || {
                let eps = random(&[1, 2, 2, 2, 2], 30, 1.0);
                check_op("cvf-reparameterize", &[random(&[1, 2, 2, 2, 2], 31, 1.0), uniform(&[1, 2, 2, 2, 2], 32, 0.2, 2.0)], move |g, v| {
                    let lat = crate::cvf::LatentGaussian { mu: v[0], sigma: v[1] };
                    lift(reparameterize(g, lat, Some(eps.clone())))
                })
            },
        },
        GradCase {
            name: "cvf-fusion-weights+mix",
            run: || {
                let inputs = [
                    random(&[1, 2, 2, 2, 2], 33, 1.0),
                    random(&[1, 2, 2, 2, 2], 34, 1.0),
                    random(&[1, 2, 2, 2, 2], 35, 1.0),
                    random(&[1, 2, 2, 2, 2], 36, 1.0),
                    random(&[2, 2, 1, 1, 1], 37, 1.0),
                ];
                check_op("cvf-fusion-weights+mix", &inputs, |g, v| {
                    let w = lift_w(fusion_weights(g, v[2], v[3]))?;
                    let m = lift(mix(g, v[0], v[1], w))?;
                    g.conv3d(m, v[4], None, ConvGeom::unit())
                })
            },
        },
        GradCase {
            name: "cvf-end-to-end",
            run: || {
                let data = [random(&[1, 3, 2, 2, 2], 38, 1.0), random(&[1, 3, 2, 2, 2], 39, 1.0)];
                check_module("cvf-end-to-end", TOL, |bd| Cvf::new(bd, 3, -1.0), &data, |m, g, p, v| {
                    let mut rng = ChaCha8Rng::seed_from_u64(40);
                    Ok(m.forward(g, p, v[0], v[1], &mut Noise::Sample(&mut rng))?.fuse)
                })
            },
        },
        GradCase {
            name: "eur-sab",
            run: || {
                check_module("eur-sab", TOL, |bd| Conv::same(bd, "sab", 2, 1, 3, Init::Lecun), &[random(&[1, 3, 3, 3, 3], 41, 1.0)], |m, g, p, v| {
                    let (_, att) = spatial_attention(g, p, m, v[0])?;
                    Ok(g.add(v[0], att)?)
                })
            },
        },
        GradCase {
            name: "eur-end-to-end",
            run: || {
                let cfg = EurConfig {
                    fusion_width: 2,
                    sab_kernel: 3,
                    upsample: Interp::Trilinear,
                };
                let data = [
                    random(&[1, 2, 8, 8, 8], 42, 1.0),
                    random(&[1, 2, 4, 4, 4], 43, 1.0),
                    random(&[1, 2, 2, 2, 2], 44, 1.0),
                    random(&[1, 3, 1, 1, 1], 45, 1.0),
                    random(&[1, 2, 8, 8, 8], 46, 1.0),
                ];
                check_module("eur-end-to-end", TOL, |bd| Eur::new(bd, &cfg, &[2, 2, 2, 3], 2), &data, |m, g, p, v| {
                    let b = belief_from_logits(g, v[4])?;
                    let probs = g.softmax(v[4], 1)?;
                    Ok(m.forward(g, p, probs, b.u, &v[..4])?.logits)
                })
            },
        },
        GradCase {
            name: "loss-dice",
            run: || {
                let (x, sm) = softmax_probs(47, [3, 3, 3]);
                let y = one_hot_2class([3, 3, 3], 48);
                scalar_loss("loss-dice", &[x], move |g, v| {
                    let p = sm(g, v[0])?;
                    let y = g.constant(y.clone());
                    dice_loss(g, p, y, 1e-5)
                })
            },
        },
        GradCase {
            name: "loss-wce",
            run: || {
                let (x, sm) = softmax_probs(49, [3, 3, 3]);
                let y = one_hot_2class([3, 3, 3], 50);
                scalar_loss("loss-wce", &[x], move |g, v| {
                    let p = sm(g, v[0])?;
                    let y = g.constant(y.clone());
                    wce_loss(g, p, y, &[0.4, 1.6])
                })
            },
        },
        GradCase {
            name: "loss-seg",
            run: || {
                let (x, sm) = softmax_probs(51, [3, 3, 3]);
                let y = one_hot_2class([3, 3, 3], 52);
                scalar_loss("loss-seg", &[x], move |g, v| {
                    let p = sm(g, v[0])?;
                    let y = g.constant(y.clone());
                    Ok(seg_loss(g, p, y, &[0.4, 1.6], &LossConfig::default())?.total)
                })
            },
        },
        GradCase {
            name: "loss-kl",
            run: || {
                let y = one_hot_2class([3, 3, 3], 53);
                scalar_loss("loss-kl", &[uniform(&[1, 2, 3, 3, 3], 54, 1.05, 6.0)], move |g, v| {
                    let y = g.constant(y.clone());
                    evidential_kl_loss(g, v[0], y, 0.7)
                })
            },
        },
        GradCase {
            name: "loss-total-toy-model",
            run: || {
                // Two-class 4³ toy model: one 3³ convolution producing logits.
                let y = one_hot_2class([4, 4, 4], 55);
                let x = random(&[1, 1, 4, 4, 4], 56, 1.0);
                let inputs = [random(&[2, 1, 3, 3, 3], 57, 0.3), random(&[2], 58, 0.1)];
                scalar_loss("loss-total-toy-model", &inputs, move |g, v| {
                    let x = g.constant(x.clone());
                    let y = g.constant(y.clone());
                    let logits = g.conv3d(x, v[0], Some(v[1]), ConvGeom::same(3))?;
                    let p = g.softmax(logits, 1)?;
                    let b = belief_from_logits(g, logits)?;
                    Ok(total_loss(g, p, Some(b.alpha), y, 0.5, &[0.4, 1.6], &LossConfig::default())?.total)
                })
            },
        },
    ]
}

fn lift_w(r: crate::Result<crate::cvf::FusionWeights>) -> vf_tensor::Result<crate::cvf::FusionWeights> {
    r.map_err(|e| TensorError::Usage(e.to_string()))
}

/// Runs every case whose name contains `filter` (all when `None`).
pub fn run(filter: Option<&str>) -> Vec<GradReport> {
    cases()
        .into_iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| (c.run)())
        .collect()
}
