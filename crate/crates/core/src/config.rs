//! Declarative run configuration.
//!
//! A run is described by one JSON document (see the repository README for
//! the schema); every field has a default, so `{}` is a valid config. The
//! `method` field selects between the full multi-expert model and the
//! single-expert baselines; baselines override the relevant switches, and
//! the ablation matrix overrides them per variant.

use crate::augment::AugmentKind;
use crate::ensemble::{DistillConfig, DistillMode, FusionConfig};
use crate::losses::BclConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Full collaborative multi-expert model.
    Come,
    /// Single expert, plain softmax cross-entropy.
    CeBaseline,
    /// Cross-entropy with class-balanced oversampling of the training set.
    OversampleBaseline,
    /// Single expert with an auxiliary supervised contrastive loss.
    SupconBaseline,
}

/// Which contrastive objective an expert trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastSetting {
    Off,
    Balanced,
    SupervisedUnbalanced,
    Unsupervised,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct TrainConfig {
    pub method: Method,
    /// Expert count K; baselines force 1.
    pub experts: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epoch cap; early stopping usually ends a run first.
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub hidden: usize,
    pub z_dim: usize,
    pub layers: usize,
    /// Balanced contrastive temperature and pair weight.
    pub bcl: BclConfig,
    /// Gating temperature, contrastive fusion weight, similarity kind.
    pub fusion: FusionConfig,
    /// Inter-expert distillation weights and mode.
    pub distill: DistillConfig,
    pub contrast: ContrastSetting,
    /// Class-frequency balanced probability; off means plain softmax.
    pub balanced_probability: bool,
    /// Hard class mining on the supervised loss.
    pub hcm: bool,
    /// Hard class count; `None` picks `round(0.3 · M)` clamped to `[1, M-1]`.
    pub m_hard: Option<usize>,
    pub gated_fusion: bool,
    pub inter_expert: bool,
    /// Average the mirrored contrastive term that anchors view 2.
    pub symmetrize_views: bool,
    /// Score anchors against the projected embedding instead of the raw one.
    pub anchors_use_projected: bool,
    pub augment_ratio: f64,
    /// Ordered augmentation pair per expert; cycles when K exceeds the list.
    pub augment_pairs: Vec<(AugmentKind, AugmentKind)>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Come,
            experts: 3,
            batch_size: 32,
            learning_rate: 1e-4,
            epochs: 200,
            patience: 20,
            seed: 0,
            hidden: 64,
            z_dim: 64,
            layers: 2,
            bcl: BclConfig::default(),
            fusion: FusionConfig::default(),
            distill: DistillConfig::default(),
            contrast: ContrastSetting::Balanced,
            balanced_probability: true,
            hcm: true,
            m_hard: None,
            gated_fusion: true,
            inter_expert: true,
            symmetrize_views: false,
            anchors_use_projected: false,
            augment_ratio: 0.2,
            augment_pairs: default_augment_pairs(),
            eval_batch: 64,
        }
    }
}

/// Distinct ordered pairs: each expert contrasts two different view kinds.
pub fn default_augment_pairs() -> Vec<(AugmentKind, AugmentKind)> {
    vec![
        (AugmentKind::AttributeMask, AugmentKind::NodeDrop),
        (AugmentKind::NodeDrop, AugmentKind::EdgePerturb),
        (AugmentKind::EdgePerturb, AugmentKind::Subgraph),
        (AugmentKind::Subgraph, AugmentKind::AttributeMask),
    ]
}

impl TrainConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.experts == 0 {
            return Err(ConfigError::Invalid("experts must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(ConfigError::Invalid("batch sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be positive".into()));
        }
        if self.hidden == 0 || self.z_dim == 0 || self.layers == 0 {
            return Err(ConfigError::Invalid(
                "network dimensions must be positive".into(),
            ));
        }
        self.bcl
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.fusion.kappa > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "gating temperature must be positive, got {}",
                self.fusion.kappa
            )));
        }
        if self.fusion.eta < 0.0 {
            return Err(ConfigError::Invalid("eta must be non-negative".into()));
        }
        if self.distill.beta1 < 0.0 || self.distill.beta2 < 0.0 || self.distill.epsilon < 0.0 {
            return Err(ConfigError::Invalid(
                "distillation weights must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.augment_ratio) {
            return Err(ConfigError::Invalid(format!(
                "augment ratio must be in [0, 1], got {}",
                self.augment_ratio
            )));
        }
        if self.augment_pairs.is_empty() {
            return Err(ConfigError::Invalid(
                "augment pair list must not be empty".into(),
            ));
        }
        if self.anchors_use_projected && self.z_dim != self.hidden {
            return Err(ConfigError::Invalid(
                "projected anchors require z-dim equal to hidden".into(),
            ));
        }
        Ok(())
    }

    /// Seed override from the environment, for deterministic re-runs without
    /// editing the config file.
    pub fn apply_env_seed(&mut self) {
        if let Ok(v) = std::env::var("COME_SEED") {
            if let Ok(seed) = v.trim().parse::<u64>() {
                self.seed = seed;
            }
        }
    }

    // Baselines override the switch set; the accessors below are the single
    // source of truth for what actually runs.

    pub fn effective_experts(&self) -> usize {
        match self.method {
            Method::Come => self.experts,
            _ => 1,
        }
    }

    pub fn effective_contrast(&self) -> ContrastSetting {
        match self.method {
            Method::Come => self.contrast,
            Method::SupconBaseline => ContrastSetting::SupervisedUnbalanced,
            Method::CeBaseline | Method::OversampleBaseline => ContrastSetting::Off,
        }
    }

    pub fn uses_balanced_probability(&self) -> bool {
        match self.method {
            Method::Come => self.balanced_probability,
            _ => false,
        }
    }

    pub fn uses_hcm(&self) -> bool {
        match self.method {
            Method::Come => self.hcm,
            _ => false,
        }
    }

    pub fn uses_gating(&self) -> bool {
        match self.method {
            Method::Come => self.gated_fusion && self.effective_experts() > 1,
            _ => false,
        }
    }

    pub fn uses_inter_expert(&self) -> bool {
        match self.method {
            Method::Come => self.inter_expert && self.effective_experts() > 1,
            _ => false,
        }
    }

    pub fn uses_oversampling(&self) -> bool {
        self.method == Method::OversampleBaseline
    }

    /// Resolved hard-class count for `classes` classes, `None` when mining
    /// is off or the problem is binary-degenerate (`M < 2`).
    pub fn m_hard_for(&self, classes: usize) -> Option<usize> {
        if !self.uses_hcm() || classes < 2 {
            return None;
        }
        let m = match self.m_hard {
            Some(m) => m,
            None => ((0.3 * classes as f64).round() as usize).max(1),
        };
        Some(m.clamp(1, classes - 1))
    }

    pub fn augment_pair(&self, expert: usize) -> (AugmentKind, AugmentKind) {
        self.augment_pairs[expert % self.augment_pairs.len()]
    }
}

/// Names the distillation selection for reports.
pub fn distill_mode_name(mode: DistillMode) -> &'static str {
    match mode {
        DistillMode::Disentangled => "disentangled",
        DistillMode::ClassicKl => "classic-kl",
        DistillMode::TargetOnly => "target-only",
        DistillMode::NonTargetOnly => "non-target-only",
    }
}
