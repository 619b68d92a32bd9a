//! Run configuration, read from TOML. Every key has a default and unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{AdvSign, LsganTargets};
use crate::data::{CHANNELS, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Random,
    Bbox,
    Automae,
    TwoStage,
    FromScratch,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Bbox => "bbox",
            Self::Automae => "automae",
            Self::TwoStage => "two_stage",
            Self::FromScratch => "from_scratch",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Self::Random, Self::Bbox, Self::Automae, Self::TwoStage, Self::FromScratch]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }

    /// Modes whose mask plans come from the learned generator.
    pub fn uses_generator(self) -> bool {
        matches!(self, Self::Automae | Self::TwoStage | Self::FromScratch)
    }

    /// Modes that need a separately pretrained, frozen extractor.
    pub fn needs_warmup(self) -> bool {
        matches!(self, Self::Automae | Self::TwoStage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Two-conv head over the attention maps.
    #[default]
    Conv,
    /// Parameter-free max over attention heads.
    MaxAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub samples: usize,
    pub seed: u64,
    pub noise_level: f64,
    /// Read samples from this dataset file instead of generating them.
    pub path: Option<PathBuf>,
    /// Trailing fraction of the samples held out for probe evaluation.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            seed: 0,
            noise_level: 0.05,
            path: None,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to 10% of `epochs`.
    pub warmup_epochs: Option<f64>,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub mask_ratio: f64,
    pub normalize_targets: bool,
    /// EMA momentum syncing the extractor with the reconstruction encoder in
    /// `from_scratch` mode; unset means the encoder is shared directly.
    pub ema_momentum: Option<f64>,
    /// Let the adversarial loss reach the reconstruction ViT (only has an
    /// effect in `from_scratch` mode without EMA).
    pub adv_grad_into_vit: bool,
    /// Generator-only epochs before the frozen-generator MAE stage in
    /// `two_stage` mode; defaults to `epochs`.
    pub stage1_epochs: Option<usize>,
    /// Extractor checkpoint for `automae`/`two_stage`; when unset a plain
    /// random-masking MAE is pretrained with the same budget first.
    pub extractor_checkpoint: Option<PathBuf>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Random,
            base_lr: 1.5e-4,
            batch_size: 64,
            epochs: 20,
            warmup_epochs: None,
            weight_decay: 0.05,
            betas: [0.9, 0.95],
            mask_ratio: 0.75,
            normalize_targets: false,
            ema_momentum: None,
            adv_grad_into_vit: false,
            stage1_epochs: None,
            extractor_checkpoint: None,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    /// `base_lr × batch / 256`.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn warmup(&self) -> f64 {
        self.warmup_epochs.unwrap_or(0.1 * self.epochs as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Priority boost for bbox patches (`bbox` mode) or top-K generator
    /// patches.
    pub beta: f64,
    /// Defaults to `n/4`.
    pub top_k: Option<usize>,
    pub temperature: f64,
    pub generator: GeneratorKind,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            top_k: None,
            temperature: 1.0,
            generator: GeneratorKind::Conv,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialConfig {
    pub alpha: f64,
    pub lambda: f64,
    /// Least-squares targets: fake `a`, real `b`, generator `c`.
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub sign: AdvSign,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.2,
            a: -1.0,
            b: 1.0,
            c: 0.0,
            sign: AdvSign::AsPrinted,
        }
    }
}

impl AdversarialConfig {
    pub fn targets(&self) -> LsganTargets {
        LsganTargets {
            a: self.a,
            b: self.b,
            c: self.c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            weight_decay: 1e-4,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.0, 0.2, 0.5, 1.0],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizConfig {
    pub count: usize,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self { count: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seeds: 20, step: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ViTConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub adversarial: AdversarialConfig,
    pub probe: ProbeConfig,
    pub sweep: SweepConfig,
    pub viz: VizConfig,
    pub gradcheck: GradcheckConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("key `{key}`: {msg}")));
        if let Err(e) = self.model.validate() {
            return bad("model", e.to_string());
        }
        if self.model.image_size != IMAGE_SIZE || self.model.channels != CHANNELS {
            return bad(
                "model.image_size",
                format!("the shapes dataset is {CHANNELS}×{IMAGE_SIZE}×{IMAGE_SIZE}"),
            );
        }
        if self.model.num_patches() < 2 {
            return bad("model.patch_size", "need at least two patches".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if !(t.base_lr > 0.0 && t.base_lr.is_finite()) {
            return bad("train.base_lr", format!("must be positive, got {}", t.base_lr));
        }
        if !(t.mask_ratio > 0.0 && t.mask_ratio < 1.0) {
            return bad("train.mask_ratio", format!("must lie in (0, 1), got {}", t.mask_ratio));
        }
        if t.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("train.betas", format!("must lie in [0, 1), got {:?}", t.betas));
        }
        if t.weight_decay < 0.0 {
            return bad("train.weight_decay", "must be non-negative".into());
        }
        if let Some(w) = t.warmup_epochs {
            if !(w >= 0.0) {
                return bad("train.warmup_epochs", "must be non-negative".into());
            }
        }
        if let Some(m) = t.ema_momentum {
            if !(0.0..=1.0).contains(&m) {
                return bad("train.ema_momentum", format!("must lie in [0, 1], got {m}"));
            }
        }
        if self.mask.beta < 0.0 {
            return bad("mask.beta", "must be non-negative".into());
        }
        if !(self.mask.temperature > 0.0) {
            return bad("mask.temperature", "must be positive".into());
        }
        if let Some(k) = self.mask.top_k {
            if k == 0 || k > self.model.num_patches() {
                return bad("mask.top_k", format!("must lie in 1..={}", self.model.num_patches()));
            }
        }
        if self.adversarial.lambda < 0.0 {
            return bad("adversarial.lambda", "must be non-negative".into());
        }
        if self.model.grid() < 4 && t.mode.uses_generator() {
            return bad("model.patch_size", "the discriminator needs a patch grid of at least 4×4".into());
        }
        if self.data.samples == 0 && self.data.path.is_none() {
            return bad("data.samples", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return bad("data.holdout_fraction", "must lie in [0, 1)".into());
        }
        if self.data.noise_level < 0.0 {
            return bad("data.noise_level", "must be non-negative".into());
        }
        if self.probe.batch_size == 0 {
            return bad("probe.batch_size", "must be positive".into());
        }
        Ok(())
    }

    /// `K`, defaulting to a quarter of the patches.
    pub fn top_k(&self) -> usize {
        self.mask.top_k.unwrap_or((self.model.num_patches() / 4).max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.top_k(), 16);
        assert_eq!(cfg.adversarial.targets(), LsganTargets { a: -1.0, b: 1.0, c: 0.0 });
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = Config::default();
        cfg.train.mode = Mode::TwoStage;
        cfg.train.ema_momentum = Some(0.99);
        cfg.adversarial.sign = AdvSign::LsganStandard;
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_name_the_key_and_line() {
        let err = Config::from_toml("seed = 1\n[train]\nepochs = 2\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(msg.contains("line 4"), "{msg}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "[train]\nmask_ratio = 1.0",
            "[mask]\ntemperature = 0.0",
            "[model]\npatch_size = 5",
            "[train]\nmode = \"sideways\"",
            "[adversarial]\nd = 1.0",
        ] {
            assert!(matches!(Config::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
