//! Component ablation matrix.
//!
//! The M1–M7 ladder switches the model's pieces on cumulatively, from a bare
//! multi-expert ensemble with plain softmax cross-entropy (M1) to the full
//! model (M7). Beyond the ladder, named swap variants replace the
//! contrastive objective (unsupervised or plain supervised) or the
//! distillation divergence (classic KL, target-only, non-target-only), and
//! `bpp-off` drops the class-frequency prior from the full model.
//!
//! Every variant trains with the same seed list, so rows are comparable and
//! deltas are reported against M1 (or the first requested variant).

use crate::config::{ContrastSetting, Method, TrainConfig};
use crate::data::Graph;
use crate::ensemble::DistillMode;
use crate::metrics::Metrics;
use crate::train::{evaluate_bank, train, Splits, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("unknown ablation variant {0:?}")]
    UnknownVariant(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One row of the switch matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct VariantSpec {
    pub name: String,
    pub contrast: ContrastSetting,
    pub hcm: bool,
    pub gated_fusion: bool,
    /// `None` disables inter-expert distillation.
    pub distill: Option<DistillMode>,
    pub balanced_probability: bool,
}

/// Resolve a variant name. The ladder M2..M7 keeps the balanced probability
/// on; M1 is the plain-softmax ensemble base.
pub fn parse_variant(name: &str) -> Result<VariantSpec, AblationError> {
    let spec = |contrast, hcm, gated, distill, bpp| VariantSpec {
        name: name.to_string(),
        contrast,
        hcm,
        gated_fusion: gated,
        distill,
        balanced_probability: bpp,
    };
    let full = DistillMode::Disentangled;
    Ok(match name {
        "M1" => spec(ContrastSetting::Off, false, false, None, false),
        "M2" => spec(ContrastSetting::Off, true, false, None, true),
        "M3" => spec(ContrastSetting::Balanced, false, false, None, true),
        "M4" => spec(ContrastSetting::Balanced, true, false, None, true),
        "M5" => spec(ContrastSetting::Balanced, true, true, None, true),
        "M6" => spec(ContrastSetting::Balanced, true, false, Some(full), true),
        "M7" => spec(ContrastSetting::Balanced, true, true, Some(full), true),
        "ucl" => spec(ContrastSetting::Unsupervised, true, true, Some(full), true),
        "scl" => spec(
            ContrastSetting::SupervisedUnbalanced,
            true,
            true,
            Some(full),
            true,
        ),
        "bpp-off" => spec(ContrastSetting::Balanced, true, true, Some(full), false),
        "kd-classic" => spec(
            ContrastSetting::Balanced,
            true,
            true,
            Some(DistillMode::ClassicKl),
            true,
        ),
        "kd-target" => spec(
            ContrastSetting::Balanced,
            true,
            true,
            Some(DistillMode::TargetOnly),
            true,
        ),
        "kd-nontarget" => spec(
            ContrastSetting::Balanced,
            true,
            true,
            Some(DistillMode::NonTargetOnly),
            true,
        ),
        other => return Err(AblationError::UnknownVariant(other.to_string())),
    })
}

/// The default ladder.
pub const LADDER: [&str; 7] = ["M1", "M2", "M3", "M4", "M5", "M6", "M7"];

/// Project a variant onto a base config. Everything not covered by the
/// switches (dimensions, optimizer, seeds, temperatures) carries over.
pub fn apply_variant(base: &TrainConfig, variant: &VariantSpec) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.method = Method::Come;
    cfg.contrast = variant.contrast;
    cfg.hcm = variant.hcm;
    cfg.gated_fusion = variant.gated_fusion;
    cfg.inter_expert = variant.distill.is_some();
    if let Some(mode) = variant.distill {
        cfg.distill.mode = mode;
    }
    cfg.balanced_probability = variant.balanced_probability;
    cfg
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct AblationRow {
    pub variant: VariantSpec,
    pub seeds: Vec<u64>,
    pub mean_accuracy: f64,
    pub mean_head: Option<f64>,
    pub mean_medium: Option<f64>,
    pub mean_tail: Option<f64>,
    /// Mean accuracy minus the first row's mean accuracy, in accuracy
    /// points.
    pub delta_vs_base: f64,
    pub per_seed_accuracy: Vec<f64>,
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    (xs.len() == values.len()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Train and evaluate every requested variant over the seed list.
pub fn run_ablation(
    base: &TrainConfig,
    train_split: &[Graph],
    val_split: &[Graph],
    test_split: &[Graph],
    variants: &[String],
    seeds: &[u64],
) -> Result<Vec<AblationRow>, AblationError> {
    let mut rows = Vec::with_capacity(variants.len());
    for name in variants {
        let variant = parse_variant(name)?;
        let cfg_base = apply_variant(base, &variant);
        let mut accs = Vec::with_capacity(seeds.len());
        let mut metrics: Vec<Metrics> = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = cfg_base.clone();
            cfg.seed = seed;
            let out = train(
                &cfg,
                Splits {
                    train: train_split,
                    val: val_split,
                },
            )?;
            let m = evaluate_bank(&out.bank, test_split, &out.train_counts, cfg.eval_batch)?;
            accs.push(m.overall);
            metrics.push(m);
        }
        let mean_accuracy = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        rows.push(AblationRow {
            variant,
            seeds: seeds.to_vec(),
            mean_accuracy,
            mean_head: mean_opt(&metrics.iter().map(|m| m.head).collect::<Vec<_>>()),
            mean_medium: mean_opt(&metrics.iter().map(|m| m.medium).collect::<Vec<_>>()),
            mean_tail: mean_opt(&metrics.iter().map(|m| m.tail).collect::<Vec<_>>()),
            delta_vs_base: 0.0,
            per_seed_accuracy: accs,
        });
    }
    if let Some(base_acc) = rows.first().map(|r| r.mean_accuracy) {
        for row in &mut rows {
            row.delta_vs_base = (row.mean_accuracy - base_acc) * 100.0;
        }
    }
    Ok(rows)
}

/// CSV rendering of the matrix, one line per variant.
pub fn to_csv(rows: &[AblationRow]) -> String {
    let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    let mut out = String::from("variant,contrast,hcm,gated-fusion,distill,balanced-probability,mean-accuracy,head,medium,tail,delta-vs-base\n");
    for r in rows {
        let distill = r.variant.distill.map_or("off".to_string(), |m| {
            crate::config::distill_mode_name(m).to_string()
        });
        out.push_str(&format!(
            "{},{:?},{},{},{},{},{:.4},{},{},{},{:+.2}\n",
            r.variant.name,
            r.variant.contrast,
            r.variant.hcm,
            r.variant.gated_fusion,
            distill,
            r.variant.balanced_probability,
            r.mean_accuracy,
            fmt_opt(r.mean_head),
            fmt_opt(r.mean_medium),
            fmt_opt(r.mean_tail),
            r.delta_vs_base,
        ));
    }
    out
}
