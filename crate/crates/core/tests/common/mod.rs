#![allow(dead_code)]

pub mod oracle;

use std::path::Path;

use vf_core::config::{CnnEncoderConfig, DataConfig, EurConfig, TrainConfig, ViTConfig};
use vf_core::{ModelConfig, PhantomSpec, RunConfig};

/// Small network that still exercises every branch.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_dims: [16; 3],
        vit: ViTConfig {
            patch_size: 4,
            embed_dim: 8,
            depth: 3,
            heads: 2,
            trainable_tail: 1,
            mlp_ratio: 2,
        },
        cnn: CnnEncoderConfig {
            base_channels: 4,
            num_scales: 4,
            norm_groups: 2,
        },
        eur: EurConfig {
            fusion_width: 4,
            sab_kernel: 3,
            ..EurConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn tiny_phantom(seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: [32; 3],
        num_trees: 2,
        branch_depth: 2,
        radius_root: 2.0,
        seed,
        ..PhantomSpec::default()
    }
}

pub fn tiny_run(data: &Path, seed: u64) -> RunConfig {
    RunConfig {
        data: DataConfig {
            dir: data.to_path_buf(),
            train: 2,
            val: 1,
            test: 1,
        },
        model: tiny_model(),
        train: TrainConfig {
            epochs: 2,
            lr: 1e-3,
            batch: 1,
            crop: [16; 3],
            seed,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}
