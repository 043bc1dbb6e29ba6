//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional; missing values take the defaults
//! below. A minimal file only needs what differs:
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! n_train = 64
//! n_test = 32
//!
//! [pretrain]
//! epochs = 2
//! ```

use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossWeights};
use crate::metrics::ScoreRule;
use crate::mim::MaeConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::phantom::PhantomSpec;
use crate::preproc::{DEFAULT_CROP_PAD, TARGET_SPACING, WindowSpec};
use serde::{Deserialize, Deserializer, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of pretraining, or the warmup peak of fine-tuning.
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_fraction: f64,
    /// Fine-tuning epochs with a frozen encoder (first schedule cycle).
    pub frozen_epochs: usize,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            epochs: 120,
            batch_size: 8,
            peak_lr: 3.0e-4,
            floor_lr: 3.0e-4,
            warmup_fraction: 0.0,
            frozen_epochs: 0,
            weight_decay: AdamWConfig::default().weight_decay,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            epochs: 10,
            batch_size: 2,
            peak_lr: 5.0e-5,
            floor_lr: 5.0e-10,
            warmup_fraction: 0.1,
            frozen_epochs: 2,
            weight_decay: AdamWConfig::default().weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Error::Config(format!("{field}: {why}"));
        if self.epochs == 0 {
            return Err(bad("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(bad("peak_lr", "must be positive"));
        }
        if !(self.floor_lr.is_finite() && self.floor_lr >= 0.0 && self.floor_lr <= self.peak_lr) {
            return Err(bad("floor_lr", "must lie in [0, peak_lr]"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(bad("warmup_fraction", "must lie in [0, 1)"));
        }
        if self.frozen_epochs > self.epochs {
            return Err(bad("frozen_epochs", "exceeds epochs"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::finetune()
    }
}

/// A training section as written in a file: keys left out keep the
/// defaults of the section's own phase.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialTrain {
    phase: Option<Phase>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    peak_lr: Option<f64>,
    floor_lr: Option<f64>,
    warmup_fraction: Option<f64>,
    frozen_epochs: Option<usize>,
    weight_decay: Option<f64>,
}

impl PartialTrain {
    fn over(self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            phase: self.phase.unwrap_or(base.phase),
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            peak_lr: self.peak_lr.unwrap_or(base.peak_lr),
            floor_lr: self.floor_lr.unwrap_or(base.floor_lr),
            warmup_fraction: self.warmup_fraction.unwrap_or(base.warmup_fraction),
            frozen_epochs: self.frozen_epochs.unwrap_or(base.frozen_epochs),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
        }
    }
}

fn pretrain_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    Ok(PartialTrain::deserialize(d)?.over(TrainConfig::pretrain()))
}

fn finetune_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    Ok(PartialTrain::deserialize(d)?.over(TrainConfig::finetune()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Phantom generator settings; its `seed` is replaced by the master seed.
    pub phantom: PhantomSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Extra held-out scans that all carry a nodule.
    pub n_probe: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            phantom: PhantomSpec::default(),
            n_train: 512,
            n_test: 128,
            n_probe: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window: WindowSpec,
    pub target_spacing: [f64; 3],
    pub crop_pad: [usize; 3],
    /// Intensity used to pad up to the canonical grid, in HU.
    pub fill_hu: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window: WindowSpec::default(),
            target_spacing: TARGET_SPACING,
            crop_pad: DEFAULT_CROP_PAD,
            fill_hu: -1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_boot: usize,
    pub alpha: f64,
    pub score_rule: ScoreRule,
    pub plots: bool,
    /// Training scans whose predictions are checked for isotonicity after
    /// every epoch.
    pub probe_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_boot: 1000,
            alpha: 0.05,
            score_rule: ScoreRule::default(),
            plots: true,
            probe_batch: 8,
        }
    }
}

/// Supervision available to a fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Nodule masks plus lobe labels: both guidance terms.
    ExpertAnno,
    /// Lobe or side labels only: the region term.
    LobeSide,
    /// Risk loss alone.
    None,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::ExpertAnno, Regime::LobeSide, Regime::None];

    pub fn name(self) -> &'static str {
        match self {
            Regime::ExpertAnno => "expert-anno",
            Regime::LobeSide => "lobe-side",
            Regime::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Regime> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}` (expert-anno, lobe-side, none)")))
    }

    /// Loss weights of the regime; only the weights differ between regimes.
    pub fn weights(self, base: LossWeights) -> LossWeights {
        match self {
            Regime::ExpertAnno => base,
            Regime::LobeSide => LossWeights { lambda_kl: 0.0, ..base },
            Regime::None => LossWeights::NONE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed: phantoms, initialization, shuffling, masks, bootstrap.
    pub seed: u64,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub mae: MaeConfig,
    #[serde(deserialize_with = "pretrain_section")]
    pub pretrain: TrainConfig,
    #[serde(deserialize_with = "finetune_section")]
    pub finetune: TrainConfig,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub regime: Regime,
    pub regimes: Vec<Regime>,
    pub evaluate: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            mae: MaeConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            regime: Regime::ExpertAnno,
            regimes: Regime::ALL.to_vec(),
            evaluate: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => Error::Config(format!("{}: {other}", path.display())),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Phantom settings with the master seed and the model's patch grid.
    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed,
            patch_size: self.model.patch_size,
            ..self.data.phantom.clone()
        }
    }

    /// Fine-tuning loss settings under the configured regime.
    pub fn loss_for(&self, regime: Regime) -> LossConfig {
        LossConfig {
            weights: regime.weights(self.loss.weights),
            ..self.loss
        }
    }

    pub fn optimizer_for(&self, t: &TrainConfig) -> AdamWConfig {
        AdamWConfig {
            weight_decay: t.weight_decay,
            ..self.optimizer
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, e: Error| Error::Config(format!("[{section}] {e}"));
        self.phantom_spec().validate().map_err(|e| wrap("data.phantom", e))?;
        self.model.validate().map_err(|e| wrap("model", e))?;
        self.preprocess.window.validate().map_err(|e| wrap("preprocess", e))?;
        if self
            .preprocess
            .target_spacing
            .iter()
            .any(|&s| !(s.is_finite() && s > 0.0))
        {
            return Err(Error::Config("[preprocess] target_spacing must be positive".into()));
        }
        self.pretrain.validate().map_err(|e| wrap("pretrain", e))?;
        self.finetune.validate().map_err(|e| wrap("finetune", e))?;
        if self.pretrain.phase != Phase::Pretrain || self.finetune.phase != Phase::Finetune {
            return Err(Error::Config("phase keys disagree with their sections".into()));
        }
        self.loss.weights.validate().map_err(|e| wrap("loss", e))?;
        if !(self.mae.mask_ratio > 0.0 && self.mae.mask_ratio < 1.0) {
            return Err(Error::Config("[mae] mask_ratio must lie in (0, 1)".into()));
        }
        if self.data.n_train == 0 {
            return Err(Error::Config("[data] n_train must be at least 1".into()));
        }
        if !(self.evaluate.alpha > 0.0 && self.evaluate.alpha < 1.0) || self.evaluate.n_boot == 0 {
            return Err(Error::Config("[evaluate] need n_boot > 0 and alpha in (0, 1)".into()));
        }
        if self.regimes.is_empty() {
            return Err(Error::Config("regimes must not be empty".into()));
        }
        Ok(())
    }
}
