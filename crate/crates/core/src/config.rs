//! Run configuration, read from sectioned `key = value` TOML files.
//!
//! Unknown keys are rejected so a typo never silently falls back to a default.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vf_tensor::UpsampleMode;

use crate::error::{Result, VfError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Number of final blocks that stay in the optimizer's parameter set.
    pub trainable_tail: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 96,
            depth: 6,
            heads: 4,
            trainable_tail: 2,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnEncoderConfig {
    pub base_channels: usize,
    pub num_scales: usize,
    pub norm_groups: usize,
}

impl Default for CnnEncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            num_scales: 4,
            norm_groups: 8,
        }
    }
}

impl CnnEncoderConfig {
    /// Channel count at scale `i` (0 = full resolution).
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn deepest_channels(&self) -> usize {
        self.channels(self.num_scales - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvfConfig {
    /// Initial bias of the log-sigma heads.
    pub logsigma_init: f64,
}

impl Default for CvfConfig {
    fn default() -> Self {
        Self {
            logsigma_init: -3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    Nearest,
    Trilinear,
}

impl From<Interp> for UpsampleMode {
    fn from(i: Interp) -> Self {
        match i {
            Interp::Nearest => UpsampleMode::Nearest,
            Interp::Trilinear => UpsampleMode::Trilinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EurConfig {
    /// Common channel width of the per-scale projections.
    pub fusion_width: usize,
    pub sab_kernel: usize,
    pub upsample: Interp,
}

impl Default for EurConfig {
    fn default() -> Self {
        Self {
            fusion_width: 8,
            sab_kernel: 7,
            upsample: Interp::Trilinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub enhanced_vit: bool,
    pub cvf: bool,
    pub eur: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Ablation::Ours.flags()
    }
}

/// Named rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Net1,
    Net2,
    Net3,
    Net4,
    Ours,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Net1,
        Ablation::Net2,
        Ablation::Net3,
        Ablation::Net4,
        Ablation::Ours,
    ];

    pub fn flags(self) -> AblationFlags {
        let (enhanced_vit, cvf, eur) = match self {
            Ablation::Net1 => (false, false, false),
            Ablation::Net2 => (true, false, false),
            Ablation::Net3 => (true, true, false),
            Ablation::Net4 => (false, false, true),
            Ablation::Ours => (true, true, true),
        };
        AblationFlags {
            enhanced_vit,
            cvf,
            eur,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Net1 => "net1",
            Ablation::Net2 => "net2",
            Ablation::Net3 => "net3",
            Ablation::Net4 => "net4",
            Ablation::Ours => "ours",
        }
    }
}

impl FromStr for Ablation {
    type Err = VfError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| VfError::config("ablation", format!("unknown row `{s}` (expected net1..net4 or ours)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Input extents the positional embedding is laid out for; other
    /// sizes are handled by resizing the embedding.
    pub input_dims: [usize; 3],
    /// Hidden width ratio of the channel-attention MLP in AGE.
    pub age_reduction: usize,
    pub vit: ViTConfig,
    pub cnn: CnnEncoderConfig,
    pub cvf: CvfConfig,
    pub eur: EurConfig,
    pub ablation: AblationFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 2,
            input_dims: [64; 3],
            age_reduction: 4,
            vit: ViTConfig::default(),
            cnn: CnnEncoderConfig::default(),
            cvf: CvfConfig::default(),
            eur: EurConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let v = &self.vit;
        if self.num_classes < 2 {
            return Err(VfError::config("model.num_classes", "need at least 2 classes"));
        }
        if self.in_channels == 0 {
            return Err(VfError::config("model.in_channels", "must be positive"));
        }
        if self.cnn.num_scales != 4 {
            return Err(VfError::config("model.cnn.num_scales", "the multi-scale fusion is defined for exactly 4 scales"));
        }
        if self.cnn.base_channels == 0 || self.cnn.norm_groups == 0 {
            return Err(VfError::config("model.cnn.base_channels", "must be positive"));
        }
        if !self.cnn.base_channels.is_multiple_of(self.cnn.norm_groups) {
            return Err(VfError::config(
                "model.cnn.norm_groups",
                format!("{} channels not divisible into {} groups", self.cnn.base_channels, self.cnn.norm_groups),
            ));
        }
        if v.heads == 0 || !v.embed_dim.is_multiple_of(v.heads) {
            return Err(VfError::config("model.vit.heads", format!("embed_dim {} not divisible by {} heads", v.embed_dim, v.heads)));
        }
        if v.trainable_tail == 0 || v.trainable_tail > v.depth {
            return Err(VfError::config("model.vit.trainable_tail", format!("must lie in 1..={}", v.depth)));
        }
        if v.patch_size == 0 || v.mlp_ratio == 0 {
            return Err(VfError::config("model.vit.patch_size", "must be positive"));
        }
        if self.eur.fusion_width == 0 || self.eur.sab_kernel.is_multiple_of(2) {
            return Err(VfError::config("model.eur.sab_kernel", "fusion width must be positive and the kernel odd"));
        }
        if self.age_reduction == 0 || self.age_reduction > self.cnn.deepest_channels() {
            return Err(VfError::config("model.age_reduction", "must lie in 1..=deepest channel count"));
        }
        if self.ablation.cvf && !self.ablation.enhanced_vit {
            return Err(VfError::config("model.ablation.cvf", "variational fusion needs the ViT branch (enhanced_vit = true)"));
        }
        Ok(())
    }

    /// Checks that a `[D,H,W]` input is accepted by both encoders.
    pub fn check_input(&self, dims: [usize; 3]) -> Result<()> {
        let m = 1 << (self.cnn.num_scales - 1);
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(VfError::config("input", format!("extents {dims:?} must be divisible by {m}")));
        }
        if self.ablation.enhanced_vit {
            let p = self.vit.patch_size;
            if dims.iter().any(|&d| d % p != 0) {
                return Err(VfError::config("input", format!("extents {dims:?} must be divisible by patch size {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassWeightMode {
    InverseFrequency,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    /// Epochs over which the KL weight ramps linearly to 1. Unset means 10% of the run.
    pub anneal_epochs: Option<usize>,
    pub smooth: f64,
    pub class_weight_mode: ClassWeightMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            anneal_epochs: None,
            smooth: 1e-5,
            class_weight_mode: ClassWeightMode::InverseFrequency,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(VfError::config("loss.gamma", "must lie in [0, 1]"));
        }
        if !(self.smooth > 0.0) {
            return Err(VfError::config("loss.smooth", "must be positive"));
        }
        if self.anneal_epochs == Some(0) {
            return Err(VfError::config("loss.anneal_epochs", "must be positive"));
        }
        Ok(())
    }

    pub fn anneal_for(&self, total_epochs: usize) -> usize {
        self.anneal_epochs
            .unwrap_or_else(|| ((total_epochs as f64 * 0.1).round() as usize).max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub crop: [usize; 3],
    pub seed: u64,
    /// Sliding-window size for validation; defaults to the crop.
    pub window: Option<[usize; 3]>,
    pub fg_redraw_prob: f64,
    pub fg_redraw_tries: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr: 1e-4,
            batch: 2,
            crop: [64; 3],
            seed: 0,
            window: None,
            fg_redraw_prob: 0.7,
            fg_redraw_tries: 10,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn window(&self) -> [usize; 3] {
        self.window.unwrap_or(self.crop)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train: 20,
            val: 5,
            test: 5,
        }
    }
}

/// Complete configuration of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch == 0 {
            return Err(VfError::config("train.batch", "must be >= 1"));
        }
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return Err(VfError::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&t.fg_redraw_prob) {
            return Err(VfError::config("train.fg_redraw_prob", "must lie in [0, 1]"));
        }
        self.model
            .check_input(t.crop)
            .map_err(|e| VfError::config("train.crop", e.to_string()))?;
        self.model
            .check_input(t.window())
            .map_err(|e| VfError::config("train.window", e.to_string()))?;
        if self.data.train == 0 {
            return Err(VfError::config("data.train", "need at least one training case"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

/// Parses a TOML document into `T`; errors carry the offending key and line.
pub fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| VfError::Parse {
        path: path.to_path_buf(),
        msg: e.to_string().trim_end().to_string(),
    })
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| VfError::io(path, e))?;
    parse_toml(&text, path)
}
