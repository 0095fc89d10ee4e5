//! The training loop: per-step graph construction, the optimizer cycle,
//! validation-based early stopping, and the best-checkpoint policy.
//!
//! One step builds a fresh tape: every expert encodes the original batch for
//! its logits and, when a contrastive objective is on, two augmented views
//! for its projections; the per-expert losses are fused under the gating
//! weights, the inter-expert distillation term is added, and one backward
//! pass feeds Adam. Everything is a deterministic function of the config
//! seed.

use crate::augment::{apply, AugmentSpec};
use crate::config::{ContrastSetting, TrainConfig};
use crate::data::{DataError, DatasetStats, Graph};
use crate::ensemble::{
    fusion_loss, gating_weights, inter_expert_loss, total_loss, uniform_gating, EnsembleError,
};
use crate::expert::{classify, encode_batch, project, ExpertBank, ExpertError, NetDims};
use crate::losses::{
    contrastive_loss_batch, supervised_loss_batch, ClassPrior, ContrastMode, LossError,
};
use crate::metrics::{evaluate, Metrics, MetricsError};
use crate::optim::Adam;
use crate::seeding;
use crate::tensor::{Tape, TensorError, TensorId};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        epoch: usize,
        batch: usize,
        source: TensorError,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Scalar values of every loss component for one step or one epoch mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct LossBreakdown {
    pub fused_supervised: f64,
    pub fused_contrastive: f64,
    pub fusion: f64,
    pub inter: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The bank at the best validation epoch.
    pub bank: ExpertBank,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochRecord>,
    pub train_counts: Vec<usize>,
}

/// Train/validation split borrowed by [`train`]; the test split stays out of
/// the loop entirely.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a [Graph],
    pub val: &'a [Graph],
}

fn attr_width(graphs: &[Graph]) -> Result<usize> {
    let w = graphs
        .first()
        .ok_or_else(|| TrainError::Config("empty training split".into()))?
        .attr_dim;
    if graphs.iter().any(|g| g.attr_dim != w) {
        return Err(TrainError::Config("inconsistent attribute widths".into()));
    }
    Ok(w)
}

/// Everything a single optimization step needs besides the batch itself.
pub struct StepContext<'a> {
    pub cfg: &'a TrainConfig,
    pub prior: &'a ClassPrior,
    pub m_hard: Option<usize>,
    pub dims: NetDims,
}

impl<'a> StepContext<'a> {
    pub fn new(cfg: &'a TrainConfig, prior: &'a ClassPrior, dims: NetDims) -> Self {
        let m_hard = cfg.m_hard_for(dims.classes);
        Self {
            cfg,
            prior,
            m_hard,
            dims,
        }
    }
}

/// Run one optimization step on a batch. `epoch` feeds the augmentation
/// seed stream together with `sample_ids`, the dataset indices of the batch
/// members, so view randomness follows sample identity rather than batch
/// position.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    bank: &mut ExpertBank,
    adam: &mut Adam,
    batch: &[&Graph],
    labels: &[usize],
    sample_ids: &[u64],
    ctx: &StepContext,
    epoch: usize,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound: Vec<_> = bank
        .experts
        .iter()
        .map(|e| e.bind(&mut tape))
        .collect::<std::result::Result<_, _>>()?;

    let contrast = ctx.cfg.effective_contrast();
    let mut logit_ids = Vec::with_capacity(bound.len());
    let mut proto_ids = Vec::with_capacity(bound.len());
    let mut supervised_ids = Vec::with_capacity(bound.len());
    let mut contrastive_ids = Vec::with_capacity(bound.len());
    let mut sup_batches = Vec::with_capacity(bound.len());

    for (k, bexp) in bound.iter().enumerate() {
        let h_orig = encode_batch(&mut tape, batch, bexp, &ctx.dims)?;
        let logits = classify(&mut tape, h_orig, bexp)?;
        let sup = supervised_loss_batch(&mut tape, logits, labels, ctx.prior, ctx.m_hard)?;
        logit_ids.push(logits);
        proto_ids.push(bexp.gate_proto);
        supervised_ids.push(sup.loss);
        sup_batches.push(sup);

        if contrast != ContrastSetting::Off {
            let (kind1, kind2) = ctx.cfg.augment_pair(k);
            let make_view =
                |kind, view: u64, tape: &mut Tape, bexp| -> Result<(TensorId, TensorId)> {
                    let views: Vec<Graph> = batch
                        .iter()
                        .zip(sample_ids)
                        .map(|(g, &sid)| {
                            let seed = seeding::derive(
                                ctx.cfg.seed,
                                &[0xA9, epoch as u64, sid, view, k as u64],
                            );
                            apply(
                                g,
                                &AugmentSpec {
                                    kind,
                                    ratio: ctx.cfg.augment_ratio,
                                    seed,
                                },
                            )
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    let refs: Vec<&Graph> = views.iter().collect();
                    let h = encode_batch(tape, &refs, bexp, &ctx.dims)?;
                    let z = project(tape, h, bexp)?;
                    Ok((h, z))
                };
            let (h1, z1) = make_view(kind1, 1, &mut tape, bexp)?;
            let (h2, z2) = make_view(kind2, 2, &mut tape, bexp)?;

            let mode = match contrast {
                ContrastSetting::Balanced => ContrastMode::Balanced {
                    tau: ctx.cfg.bcl.tau,
                    alpha: ctx.cfg.bcl.alpha,
                },
                ContrastSetting::SupervisedUnbalanced => ContrastMode::SupervisedUnbalanced {
                    tau: ctx.cfg.bcl.tau,
                },
                ContrastSetting::Unsupervised => ContrastMode::Unsupervised {
                    tau: ctx.cfg.bcl.tau,
                },
                ContrastSetting::Off => unreachable!(),
            };
            let anchor_ref_1 = if ctx.cfg.anchors_use_projected {
                z1
            } else {
                h1
            };
            let mut c = contrastive_loss_batch(
                &mut tape,
                z1,
                z2,
                anchor_ref_1,
                bexp.anchors,
                labels,
                mode,
            )?;
            if ctx.cfg.symmetrize_views {
                let anchor_ref_2 = if ctx.cfg.anchors_use_projected {
                    z2
                } else {
                    h2
                };
                let mirrored = contrastive_loss_batch(
                    &mut tape,
                    z2,
                    z1,
                    anchor_ref_2,
                    bexp.anchors,
                    labels,
                    mode,
                )?;
                let sum = tape.add(c, mirrored)?;
                c = tape.scale(sum, 0.5)?;
            }
            contrastive_ids.push(c);
        }
    }

    let gating = if ctx.cfg.uses_gating() {
        gating_weights(&mut tape, &logit_ids, &proto_ids, &ctx.cfg.fusion)?
    } else {
        uniform_gating(&mut tape, batch.len(), bound.len())?
    };
    let contrastive_opt = (!contrastive_ids.is_empty()).then_some(contrastive_ids.as_slice());
    let parts = fusion_loss(
        &mut tape,
        gating,
        &supervised_ids,
        contrastive_opt,
        ctx.cfg.fusion.eta,
    )?;

    let inter = if ctx.cfg.uses_inter_expert() {
        inter_expert_loss(&mut tape, &sup_batches, labels, &ctx.cfg.distill)?
    } else {
        tape.leaf(vec![0.0], 1, 1)?
    };
    let total = total_loss(&mut tape, parts.fusion, inter, ctx.cfg.distill.epsilon)?;

    let breakdown = LossBreakdown {
        fused_supervised: tape.scalar_value(parts.fused_supervised)?,
        fused_contrastive: parts
            .fused_contrastive
            .map(|id| tape.scalar_value(id))
            .transpose()?
            .unwrap_or(0.0),
        fusion: tape.scalar_value(parts.fusion)?,
        inter: tape.scalar_value(inter)?,
        total: tape.scalar_value(total)?,
    };

    tape.backward(total)?;
    let grad_ids: Vec<TensorId> = bound.iter().flat_map(|b| b.ids()).collect();
    let grads: Vec<&[f64]> = grad_ids
        .iter()
        .map(|&id| tape.grad(id))
        .collect::<std::result::Result<_, _>>()?;
    let mut params = bank.params_mut();
    let mut values: Vec<&mut Vec<f64>> = params.iter_mut().map(|p| &mut p.values).collect();
    adam.step(&mut values, &grads);
    Ok(breakdown)
}

/// Epoch sample order: plain shuffle, or class-balanced oversampling with
/// replacement up to the largest class.
fn epoch_order(
    labels: &[usize],
    counts: &[usize],
    oversample: bool,
    seed: u64,
    epoch: usize,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[0x0E, epoch as u64]));
    let mut order: Vec<usize>;
    if oversample {
        let head = *counts.iter().max().unwrap();
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        order = Vec::with_capacity(head * counts.len());
        for members in &by_class {
            for _ in 0..head {
                order.push(members[rng.gen_range(0..members.len())]);
            }
        }
    } else {
        order = (0..labels.len()).collect();
    }
    order.shuffle(&mut rng);
    order
}

/// Train under the config; returns the bank restored to its best validation
/// epoch. Identical configs and splits reproduce identical outcomes.
pub fn train(cfg: &TrainConfig, splits: Splits) -> Result<TrainOutcome> {
    cfg.validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let stats = DatasetStats::from_graphs(splits.train)?;
    let classes = stats.class_count;
    let input = attr_width(splits.train)?;
    if !splits.val.is_empty() {
        let vw = attr_width(splits.val)?;
        if vw != input {
            return Err(TrainError::Config(format!(
                "validation attribute width {vw} differs from train width {input}"
            )));
        }
    }

    let dims = NetDims {
        input,
        hidden: cfg.hidden,
        z: cfg.z_dim,
        classes,
        layers: cfg.layers,
    };
    let mut bank = ExpertBank::init(cfg.effective_experts(), dims, cfg.seed);
    let prior = if cfg.uses_balanced_probability() {
        ClassPrior::from_counts(stats.counts_by_class.clone())?
    } else {
        ClassPrior::uniform(classes)
    };
    let ctx = StepContext::new(cfg, &prior, dims);

    let sizes: Vec<usize> = bank.params().iter().map(|p| p.values.len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);

    let labels: Vec<usize> = splits.train.iter().map(|g| g.label).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_bank = bank.clone();

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(
            &labels,
            &stats.counts_by_class,
            cfg.uses_oversampling(),
            cfg.seed,
            epoch,
        );
        let mut sums = LossBreakdown::default();
        let mut steps = 0usize;
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Graph> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let sample_ids: Vec<u64> = chunk.iter().map(|&i| i as u64).collect();
            let b = train_step(
                &mut bank,
                &mut adam,
                &batch,
                &batch_labels,
                &sample_ids,
                &ctx,
                epoch,
            )
            .map_err(|e| match e {
                TrainError::Tensor(source) => TrainError::Diverged {
                    epoch,
                    batch: batch_index,
                    source,
                },
                TrainError::Expert(ExpertError::Tensor(source)) => TrainError::Diverged {
                    epoch,
                    batch: batch_index,
                    source,
                },
                TrainError::Loss(LossError::Tensor(source)) => TrainError::Diverged {
                    epoch,
                    batch: batch_index,
                    source,
                },
                TrainError::Ensemble(EnsembleError::Tensor(source)) => TrainError::Diverged {
                    epoch,
                    batch: batch_index,
                    source,
                },
                other => other,
            })?;
            sums.fused_supervised += b.fused_supervised;
            sums.fused_contrastive += b.fused_contrastive;
            sums.fusion += b.fusion;
            sums.inter += b.inter;
            sums.total += b.total;
            steps += 1;
        }
        let inv = 1.0 / steps.max(1) as f64;
        let losses = LossBreakdown {
            fused_supervised: sums.fused_supervised * inv,
            fused_contrastive: sums.fused_contrastive * inv,
            fusion: sums.fusion * inv,
            inter: sums.inter * inv,
            total: sums.total * inv,
        };

        let val_accuracy = if splits.val.is_empty() {
            f64::NAN
        } else {
            evaluate(&bank, splits.val, &stats.counts_by_class, cfg.eval_batch)?.overall
        };
        history.push(EpochRecord {
            epoch,
            losses,
            val_accuracy,
        });

        if splits.val.is_empty() {
            best_epoch = epoch;
            best_bank = bank.clone();
        } else if val_accuracy > best_val {
            best_val = val_accuracy;
            best_epoch = epoch;
            best_bank = bank.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        bank: best_bank,
        best_epoch,
        best_val_accuracy: best_val,
        history,
        train_counts: stats.counts_by_class,
    })
}

/// Evaluate a trained bank on a split with the counts it was trained on.
pub fn evaluate_bank(
    bank: &ExpertBank,
    graphs: &[Graph],
    train_counts: &[usize],
    eval_batch: usize,
) -> Result<Metrics> {
    Ok(evaluate(bank, graphs, train_counts, eval_batch)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Method;
    use crate::data::longtail::{make_long_tailed, split_balanced, LongTailSpec};
    use crate::data::motif::{generate_motif_corpus, MotifSpec};

    fn tiny_corpus() -> (Vec<Graph>, Vec<Graph>, Vec<Graph>) {
        let corpus = generate_motif_corpus(&MotifSpec::new(3, 14, 0.0, 5)).unwrap();
        let (val, test, rest) = split_balanced(&corpus, 2, 2, 1).unwrap();
        let (train, _) = make_long_tailed(&rest, &LongTailSpec::new(4.0, 2)).unwrap();
        (train, val, test)
    }

    fn fast_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            hidden: 8,
            z_dim: 8,
            batch_size: 8,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_reproduces_identical_history_and_metrics() {
        let (train_set, val, test) = tiny_corpus();
        let cfg = fast_config();
        let splits = Splits {
            train: &train_set,
            val: &val,
        };
        let a = train_run_with_eval(&cfg, splits, &test);
        let b = train_run_with_eval(&cfg, splits, &test);
        assert_eq!(a.0, b.0, "loss history must match exactly");
        assert_eq!(a.1, b.1, "test metrics must match exactly");
    }

    fn train_run_with_eval(
        cfg: &TrainConfig,
        splits: Splits,
        test: &[Graph],
    ) -> (Vec<EpochRecord>, Metrics) {
        let out = train(cfg, splits).unwrap();
        let m = evaluate_bank(&out.bank, test, &out.train_counts, cfg.eval_batch).unwrap();
        (out.history, m)
    }

    #[test]
    fn one_step_descends_on_a_frozen_batch() {
        let (train_set, _, _) = tiny_corpus();
        let mut cfg = fast_config();
        cfg.learning_rate = 1e-5;
        let stats = DatasetStats::from_graphs(&train_set).unwrap();
        let dims = NetDims {
            input: train_set[0].attr_dim,
            hidden: cfg.hidden,
            z: cfg.z_dim,
            classes: stats.class_count,
            layers: cfg.layers,
        };
        let prior = ClassPrior::from_counts(stats.counts_by_class.clone()).unwrap();
        let ctx = StepContext::new(&cfg, &prior, dims);
        let mut bank = ExpertBank::init(cfg.effective_experts(), dims, cfg.seed);
        let sizes: Vec<usize> = bank.params().iter().map(|p| p.values.len()).collect();
        let mut adam = Adam::new(cfg.learning_rate, &sizes);

        let batch: Vec<&Graph> = train_set.iter().take(8).collect();
        let labels: Vec<usize> = batch.iter().map(|g| g.label).collect();
        let ids: Vec<u64> = (0..8).collect();
        // Same epoch and sample ids both times: identical views, so the
        // second pass measures the loss after one update.
        let before = train_step(&mut bank, &mut adam, &batch, &labels, &ids, &ctx, 1).unwrap();
        let mut adam2 = Adam::new(0.0, &sizes); // frozen re-measurement
        let after = train_step(&mut bank, &mut adam2, &batch, &labels, &ids, &ctx, 1).unwrap();
        assert!(
            after.total < before.total,
            "loss must decrease: {} -> {}",
            before.total,
            after.total
        );
    }

    #[test]
    fn oversampling_balances_the_epoch() {
        let labels = vec![0, 0, 0, 0, 0, 0, 1, 1, 2];
        let counts = vec![6, 2, 1];
        let order = epoch_order(&labels, &counts, true, 3, 1);
        assert_eq!(order.len(), 18); // 3 classes × head size 6
        let mut seen = vec![0usize; 3];
        for &i in &order {
            seen[labels[i]] += 1;
        }
        assert_eq!(seen, vec![6, 6, 6]);
    }

    #[test]
    fn divergence_reports_epoch_and_batch() {
        let (train_set, val, _) = tiny_corpus();
        let mut cfg = fast_config();
        // An enormous learning rate pushes the weights to ~1e200, so the
        // second encoder layer overflows to infinity on the next step.
        cfg.learning_rate = 1e200;
        cfg.epochs = 30;
        let err = train(
            &cfg,
            Splits {
                train: &train_set,
                val: &val,
            },
        )
        .unwrap_err();
        match err {
            TrainError::Diverged { .. } => {}
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn baseline_runs_without_contrastive_machinery() {
        let (train_set, val, test) = tiny_corpus();
        let mut cfg = fast_config();
        cfg.method = Method::CeBaseline;
        let out = train(
            &cfg,
            Splits {
                train: &train_set,
                val: &val,
            },
        )
        .unwrap();
        assert!(out
            .history
            .iter()
            .all(|r| r.losses.fused_contrastive == 0.0 && r.losses.inter == 0.0));
        let m = evaluate_bank(&out.bank, &test, &out.train_counts, cfg.eval_batch).unwrap();
        assert!(m.overall >= 0.0 && m.overall <= 1.0);
    }
}
