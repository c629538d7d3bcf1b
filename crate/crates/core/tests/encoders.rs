mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vf_core::config::{CnnEncoderConfig, ViTConfig};
use vf_core::cvf::Noise;
use vf_core::encoders::{Age, CnnEncoder, Decoder, PatchEmbed, Vit};
use vf_core::nn::{Builder, ParamStore};
use vf_core::train::Trainer;
use vf_core::{Graph, LabelVolume, Model, Tensor, Volume};

type G = Graph<f64>;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
}

fn zero_matching(store: &mut ParamStore<f64>, prefix: &str) {
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameter under {prefix}");
    for id in ids {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

fn vit_cfg(depth: usize, tail: usize) -> ViTConfig {
    ViTConfig {
        patch_size: 8,
        embed_dim: 8,
        depth,
        heads: 2,
        trainable_tail: tail,
        mlp_ratio: 2,
    }
}

#[test]
fn patch_embed_token_counts() {
    let cfg = vit_cfg(1, 1);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pe = PatchEmbed::new(&mut Builder::new(&mut store, &mut rng), &cfg, 1, [32; 3]);
    for (dims, tokens) in [([32, 32, 32], 64), ([64, 64, 32], 256)] {
        let mut g = G::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(&[1, 1, dims[0], dims[1], dims[2]]));
        let (tok, grid) = pe.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(tok), &[1, tokens, 8]);
        assert_eq!(grid, dims.map(|d| d / 8));
    }
    let mut g = G::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 1, 32, 32, 20]));
    assert!(pe.forward(&mut g, &p, x).is_err());
}

#[test]
fn zero_volume_embeds_to_positional_table() {
    let cfg = vit_cfg(1, 1);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pe = PatchEmbed::new(&mut Builder::new(&mut store, &mut rng), &cfg, 1, [16; 3]);
    zero_matching(&mut store, "patch");
    let mut g = G::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 1, 16, 16, 16]));
    let (tok, _) = pe.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.value(tok).data(), store.get(pe.pos).value.data());
}

#[test]
fn frozen_prefix_layout() {
    for (depth, tail) in [(6, 2), (6, 6), (3, 1)] {
        let cfg = vit_cfg(depth, tail);
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        Vit::new(&mut Builder::new(&mut store, &mut rng), &cfg, 1, [16; 3], 4);
        for prm in store.iter() {
            let block = prm
                .name
                .strip_prefix("vit.blocks.")
                .map(|s| s.split('.').next().unwrap().parse::<usize>().unwrap());
            let expect = match block {
                Some(i) => i >= depth - tail,
                None => !prm.name.starts_with("vit.embed"),
            };
            assert_eq!(prm.trainable, expect, "{} (depth {depth}, tail {tail})", prm.name);
        }
    }
}

#[test]
fn only_trainable_tail_receives_gradients() {
    let cfg = vit_cfg(6, 2);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vit = Vit::new(&mut Builder::new(&mut store, &mut rng), &cfg, 1, [16; 3], 4);
    let mut g = G::new();
    let p = store.bind(&mut g, true);
    let x = g.constant(rand_t(&[1, 1, 16, 16, 16], 4));
    let out = vit.forward(&mut g, &p, x, [2, 2, 2]).unwrap();
    let sq = g.mul(out.grid, out.grid).unwrap();
    let l = g.sum_all(sq);
    g.backward(l).unwrap();
    for id in store.ids() {
        let prm = store.get(id);
        let grad = g.grad(p.var(id));
        if prm.trainable {
            let gr = grad.unwrap_or_else(|| panic!("{} has no gradient", prm.name));
            if prm.name.starts_with("vit.blocks.") && prm.name.ends_with(".w") && !prm.name.contains("qkv") {
                assert!(gr.data().iter().any(|v| *v != 0.0), "{} gradient is zero", prm.name);
            }
        } else {
            assert!(grad.is_none(), "{} is frozen but has a gradient", prm.name);
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = vit_cfg(2, 1);
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vit = Vit::new(&mut Builder::new(&mut store, &mut rng), &cfg, 1, [16; 3], 4);
    let mut g = G::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(rand_t(&[2, 1, 16, 16, 16], 6));
    let out = vit.forward(&mut g, &p, x, [2, 2, 2]).unwrap();
    assert_eq!(out.attention.len(), 2);
    assert_eq!(g.shape(out.grid), &[2, 4, 2, 2, 2]);
    for a in out.attention {
        assert_eq!(g.shape(a), &[4, 8, 8]);
        for row in g.value(a).data().chunks(8) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn age_properties() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let age = Age::new(&mut Builder::new(&mut store, &mut rng), 8, 4, 7);
    let mut g = G::new();
    let p = store.bind(&mut g, false);
    let zero = g.constant(Tensor::zeros(&[1, 8, 3, 3, 3]));
    let out = age.forward(&mut g, &p, zero).unwrap();
    assert!(g.value(out.out).data().iter().all(|&v| v == 0.0));

    let f = g.constant(rand_t(&[2, 8, 3, 2, 4], 8));
    let out = age.forward(&mut g, &p, f).unwrap();
    assert_eq!(g.shape(out.out), &[2, 8, 3, 2, 4]);
    assert_eq!(g.shape(out.ca), &[2, 8, 1, 1, 1]);
    assert_eq!(g.shape(out.sa), &[2, 1, 3, 2, 4]);
    for gate in [out.ca, out.sa] {
        assert!(g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    zero_matching(&mut store, "age.fuse");
    let mut g = G::new();
    let p = store.bind(&mut g, false);
    let f = g.constant(rand_t(&[1, 8, 2, 2, 2], 9));
    let out = age.forward(&mut g, &p, f).unwrap();
    assert_eq!(g.value(out.out).data(), g.value(f).data());
}

#[test]
fn cnn_pyramid_shapes_and_zero_input() {
    let cfg = CnnEncoderConfig {
        base_channels: 16,
        num_scales: 4,
        norm_groups: 8,
    };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let enc = CnnEncoder::new(&mut Builder::new(&mut store, &mut rng), &cfg, 1);
    let mut g = Graph::<f32>::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 1, 64, 64, 64]));
    let feats = enc.forward(&mut g, &p, x).unwrap();
    let shapes: Vec<_> = feats.iter().map(|&f| g.shape(f).to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![1, 16, 64, 64, 64],
            vec![1, 32, 32, 32, 32],
            vec![1, 64, 16, 16, 16],
            vec![1, 128, 8, 8, 8],
        ]
    );
    for f in feats {
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }
    let bad = g.constant(Tensor::zeros(&[1, 1, 64, 64, 60]));
    assert!(enc.forward(&mut g, &p, bad).is_err());
}

#[test]
fn decoder_restores_input_resolution() {
    let cfg = CnnEncoderConfig {
        base_channels: 4,
        num_scales: 4,
        norm_groups: 2,
    };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = &mut Builder::new(&mut store, &mut rng);
    let enc = CnnEncoder::new(b, &cfg, 1);
    let dec = Decoder::new(b, &cfg, 2);
    let run = |store: &ParamStore<f64>| {
        let mut g = G::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(rand_t(&[1, 1, 16, 8, 16], 12));
        let feats = enc.forward(&mut g, &p, x).unwrap();
        let out = dec.forward(&mut g, &p, feats[3], &feats[..3]).unwrap();
        assert_eq!(g.shape(out.logits), &[1, 2, 16, 8, 16]);
        assert_eq!(out.feats.len(), 4);
        let probs = g.softmax(out.logits, 1).unwrap();
        g.value(probs).clone()
    };
    let pr = run(&store);
    let half = pr.numel() / 2;
    for i in 0..half {
        assert!((pr.data()[i] + pr.data()[i + half] - 1.0).abs() < 1e-12);
    }
    zero_matching(&mut store, "dec.head");
    assert!(run(&store).data().iter().all(|&v| v == 0.5));
}

#[test]
fn optimizer_step_leaves_frozen_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_run(dir.path(), 3);
    let mut trainer = Trainer::new(&cfg).unwrap();
    let before = trainer.model.params.clone();
    let image = Volume::new([16; 3], [1.0; 3], rand_t(&[4096], 13).data().iter().map(|&v| v as f32).collect()).unwrap();
    let label = LabelVolume::new([16; 3], [1.0; 3], (0..4096).map(|i| (i % 7 == 0) as u8).collect()).unwrap();
    trainer.step(&[(image, label)], 0).unwrap();
    let mut moved = 0;
    for id in before.ids() {
        let (a, b) = (before.get(id), trainer.model.params.get(id));
        if a.trainable {
            moved += (a.value.data() != b.value.data()) as usize;
        } else {
            assert_eq!(a.value.data(), b.value.data(), "{} changed", a.name);
        }
    }
    let trainable = before.iter().filter(|p| p.trainable).count();
    assert!(moved > trainable / 2, "only {moved} of {trainable} trainable tensors moved");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_ablation_maps_input_to_matching_probabilities(
        row in 0usize..5,
        dz in 1usize..3,
        dy in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut cfg = common::tiny_model();
        cfg.ablation = vf_core::Ablation::ALL[row].flags();
        let model = Model::<f64>::new(&cfg, seed).unwrap();
        let dims = [8 * dz, 8 * dy, 8];
        let mut g = G::new();
        let x = g.constant(rand_t(&[1, 1, dims[0], dims[1], dims[2]], seed));
        let (_, out) = model.forward(&mut g, x, false, &mut Noise::Mean).unwrap();
        prop_assert_eq!(g.shape(out.probs), &[1, 2, dims[0], dims[1], dims[2]]);
        let pr = g.value(out.probs).data();
        let n = pr.len() / 2;
        for i in 0..n {
            prop_assert!((pr[i] + pr[i + n] - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(out.belief.is_some(), cfg.ablation.eur);
    }
}
