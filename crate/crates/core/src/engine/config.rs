use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::emdata::{AugmentConfig, NormalizationStats, DEFAULT_CLASSES};
use crate::encoder::{EncoderHandle, EncoderRole};
use crate::error::{invalid, Result};
use crate::fafm::FafmConfig;
use crate::maskhead::{DecoderConfig, UPSAMPLE};
use crate::nn::AdamConfig;
use crate::objective::{NtxentVariant, DEFAULT_LAMBDA, DEFAULT_TAU};

/// Parameter groups, by name prefix.
pub const GROUPS: [&str; 5] = ["align", "fusion", "bank", "prompt", "decoder"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub classes: Vec<String>,
    /// Shared width `N` after alignment.
    pub width: usize,
    pub reduction: usize,
    pub groups: Option<usize>,
    pub kernel: usize,
    pub decoder_hidden: usize,
    pub decoder_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
            width: 256,
            reduction: 16,
            groups: None,
            kernel: 3,
            decoder_hidden: 128,
            decoder_blocks: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Fafm,
    Concat,
    CrossAttention,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Fafm => "fafm",
            FusionMode::Concat => "concat",
            FusionMode::CrossAttention => "cross_attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub fusion: FusionMode,
    pub use_dense: bool,
    pub use_sparse: bool,
    pub use_l_cos: bool,
    pub use_residual: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Fafm,
            use_dense: true,
            use_sparse: true,
            use_l_cos: true,
            use_residual: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    /// One shuffled pool across all cells.
    #[default]
    Mixed,
    /// Batches never mix cells; cell order and within-cell order shuffled.
    PerCell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimiser steps across all epochs.
    pub max_steps: Option<usize>,
    pub lambda: f64,
    pub tau: f64,
    pub ntxent: NtxentVariant,
    pub seed: u64,
    pub shuffle: ShuffleMode,
    /// Run the epoch hook every this many epochs (0 disables it).
    pub eval_every: usize,
    /// Parameter groups held fixed.
    pub frozen: Vec<String>,
    /// Logit threshold for reported masks.
    pub threshold: f32,
    pub normalization: NormalizationStats,
    /// Offline augmentation applied once per slice before embedding.
    pub augment: Option<AugmentConfig>,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 32,
            epochs: 100,
            max_steps: None,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            ntxent: NtxentVariant::Inclusive,
            seed: 0,
            shuffle: ShuffleMode::Mixed,
            eval_every: 1,
            frozen: Vec::new(),
            threshold: 0.0,
            normalization: NormalizationStats::default(),
            augment: None,
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// The weight actually applied to `L_cos`.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.use_l_cos {
            self.lambda
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub sam: EncoderHandle,
    pub mae: EncoderHandle,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            sam: EncoderHandle::sam_default(),
            mae: EncoderHandle::mae_default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub model: ModelConfig,
    pub encoders: EncoderConfig,
    pub train: TrainConfig,
}

impl EngineConfig {
    /// Small synthetic setup: 64-pixel slices, patch 4, a 16x16 grid.
    pub fn smoke() -> Self {
        Self {
            model: ModelConfig {
                width: 32,
                reduction: 4,
                decoder_hidden: 32,
                ..ModelConfig::default()
            },
            encoders: EncoderConfig {
                sam: EncoderHandle::synthetic(EncoderRole::Sam, 64, 4, 2, 32, 101),
                mae: EncoderHandle::synthetic(EncoderRole::Mae, 64, 4, 4, 48, 202),
            },
            train: TrainConfig {
                lr: 2.5e-3,
                batch_size: 8,
                epochs: 200,
                ..TrainConfig::default()
            },
        }
    }

    pub fn fafm(&self) -> FafmConfig {
        FafmConfig {
            sam_channels: self.encoders.sam.channels,
            mae_channels: self.encoders.mae.channels,
            width: self.model.width,
            reduction: self.model.reduction,
            groups: self.model.groups,
            kernel: self.model.kernel,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            hidden: self.model.decoder_hidden,
            blocks: self.model.decoder_blocks,
            use_sparse: self.train.ablation.use_sparse,
            use_dense: self.train.ablation.use_dense,
        }
    }

    /// `(H, W)` of the embedding grid shared by both encoders.
    pub fn grid_shape(&self) -> (usize, usize) {
        let (h, w, _) = self.encoders.sam.output_shape();
        (h, w)
    }

    pub fn logit_side(&self) -> usize {
        self.grid_shape().0 * UPSAMPLE
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr > 0.0) || t.batch_size == 0 || t.epochs == 0 {
            return Err(invalid!(
                "lr, batch_size and epochs must be positive (lr={}, batch_size={}, epochs={})",
                t.lr,
                t.batch_size,
                t.epochs
            ));
        }
        if t.max_steps == Some(0) {
            return Err(invalid!("max_steps must be positive when set"));
        }
        if !(t.lambda >= 0.0) {
            return Err(invalid!("lambda must be >= 0, got {}", t.lambda));
        }
        if !(t.tau > 0.0) {
            return Err(invalid!("tau must be positive, got {}", t.tau));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return Err(invalid!("Adam betas must lie in [0,1) and eps must be positive"));
        }
        for g in &t.frozen {
            if !GROUPS.contains(&g.as_str()) {
                return Err(invalid!("unknown parameter group {g:?}; groups are {GROUPS:?}"));
            }
        }
        if let Some(a) = &t.augment {
            if !(0.0 < a.crop_min && a.crop_min <= a.crop_max && a.crop_max <= 1.0) {
                return Err(invalid!("augment crop fractions must satisfy 0 < min <= max <= 1"));
            }
        }
        let m = &self.model;
        if m.classes.len() < 2 {
            return Err(invalid!("at least 2 classes are required, got {}", m.classes.len()));
        }
        let mut sorted = m.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != m.classes.len() {
            return Err(invalid!("class names must be unique: {:?}", m.classes));
        }
        self.fafm().validate()?;
        self.decoder().validate()?;
        self.encoders.sam.validate()?;
        self.encoders.mae.validate()?;
        if self.encoders.sam.role != EncoderRole::Sam || self.encoders.mae.role != EncoderRole::Mae {
            return Err(invalid!("encoders.sam and encoders.mae must carry the sam and mae roles"));
        }
        let (s, a) = (self.encoders.sam.output_shape(), self.encoders.mae.output_shape());
        if (s.0, s.1) != (a.0, a.1) || self.encoders.sam.input_side != self.encoders.mae.input_side {
            return Err(invalid!(
                "SAM grid {}x{} and MAE grid {}x{} must match on the same input side",
                s.0,
                s.1,
                a.0,
                a.1
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.model.classes.iter().position(|c| c == name).ok_or_else(|| {
            invalid!(
                "unknown class {name:?}; valid classes: {}",
                self.model.classes.join(", ")
            )
        })
    }

    /// Replaces the value at a dotted key. The key must already exist in
    /// the schema and the result must deserialise, so both unknown keys
    /// and ill-typed values are rejected.
    pub fn with_override(&self, key: &str, value: Value) -> Result<Self> {
        let mut root = serde_json::to_value(self).map_err(|e| invalid!("{e}"))?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(invalid!("malformed key {key:?}"));
        }
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let path = parts[..=i].join(".");
            node = match node {
                Value::Object(map) => {
                    // `Option` sections serialise as null; materialise their
                    // defaults so nested keys can be reached.
                    let slot = map.get_mut(*part).ok_or_else(|| invalid!("unknown config key {path:?}"))?;
                    if slot.is_null() && i + 1 < parts.len() {
                        *slot = default_section(&path)?;
                    }
                    slot
                }
                _ => return Err(invalid!("config key {path:?} is not a table")),
            };
        }
        *node = value;
        let out: Self = serde_json::from_value(root).map_err(|e| invalid!("bad value for {key}: {e}"))?;
        Ok(out)
    }
}

fn default_section(path: &str) -> Result<Value> {
    match path {
        "train.augment" => serde_json::to_value(AugmentConfig::default()).map_err(|e| invalid!("{e}")),
        _ => Err(invalid!("config key {path:?} is unset and has no nested keys")),
    }
}

/// Rows for the standard sweeps.
pub fn lambda_sweep(base: &EngineConfig) -> Vec<(String, EngineConfig)> {
    [0.1, 0.2, 0.3]
        .into_iter()
        .map(|l| {
            let mut c = base.clone();
            c.train.lambda = l;
            (format!("lambda={l}"), c)
        })
        .collect()
}

pub fn fusion_sweep(base: &EngineConfig) -> Vec<(String, EngineConfig)> {
    [FusionMode::Concat, FusionMode::CrossAttention, FusionMode::Fafm]
        .into_iter()
        .map(|f| {
            let mut c = base.clone();
            c.train.ablation.fusion = f;
            (format!("fusion={}", f.name()), c)
        })
        .collect()
}

/// The component table: full model, then each switch turned off in turn.
pub fn component_sweep(base: &EngineConfig) -> Vec<(String, EngineConfig)> {
    let mut rows = vec![(String::from("full"), base.clone())];
    let mut push = |name: &str, f: &dyn Fn(&mut Ablation)| {
        let mut c = base.clone();
        f(&mut c.train.ablation);
        rows.push((name.into(), c));
    };
    push("fusion=concat", &|a| a.fusion = FusionMode::Concat);
    push("use_l_cos=false", &|a| a.use_l_cos = false);
    push("use_dense=false", &|a| a.use_dense = false);
    push("use_sparse=false", &|a| a.use_sparse = false);
    push("use_residual=false", &|a| a.use_residual = false);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_follow_reference_setup() {
        let c = EngineConfig::default();
        assert_eq!((c.train.lr, c.train.batch_size, c.train.epochs), (1e-3, 32, 100));
        assert_eq!(c.train.lambda, 0.2);
        assert_eq!(c.model.width, 256);
        assert_eq!(c.model.decoder_hidden, 128);
        c.validate().unwrap();
        EngineConfig::smoke().validate().unwrap();
    }

    #[test]
    fn overrides_are_type_checked() {
        let c = EngineConfig::smoke();
        let d = c.with_override("train.lr", json!(0.01)).unwrap();
        assert_eq!(d.train.lr, 0.01);
        let d = c.with_override("train.ablation.fusion", json!("concat")).unwrap();
        assert_eq!(d.train.ablation.fusion, FusionMode::Concat);
        assert!(c.with_override("train.lr", json!("fast")).is_err());
        assert!(c.with_override("train.learning_rate", json!(0.1)).is_err());
        assert!(c.with_override("train.ablation.fusion", json!("sum")).is_err());
        let d = c.with_override("train.augment.crop_min", json!(0.8)).unwrap();
        assert_eq!(d.train.augment.unwrap().crop_min, 0.8);
        let d = c.with_override("model.groups", json!(4)).unwrap();
        assert_eq!(d.model.groups, Some(4));
    }

    #[test]
    fn validation_rejects_bad_setups() {
        let mut c = EngineConfig::smoke();
        c.train.ablation.use_sparse = false;
        c.train.ablation.use_dense = false;
        assert!(c.validate().is_err());
        let mut c = EngineConfig::smoke();
        c.model.classes.truncate(1);
        assert!(c.validate().is_err());
        let mut c = EngineConfig::smoke();
        c.train.frozen = vec!["encoder".into()];
        assert!(c.validate().is_err());
        let mut c = EngineConfig::smoke();
        c.model.width = 31;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sweeps_have_expected_rows() {
        let b = EngineConfig::smoke();
        assert_eq!(lambda_sweep(&b).len(), 3);
        assert_eq!(fusion_sweep(&b).len(), 3);
        assert_ne!(b.hash(), lambda_sweep(&b)[0].1.hash());
    }
}
