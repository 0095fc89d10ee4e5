//! Per-expert loss kernels: balanced contrastive loss, class-frequency
//! balanced probabilities, hard-class mining, and the individual supervised
//! loss.
//!
//! The balanced predicted probability reweights the softmax by class counts,
//! `p_j = N_j exp(o_j) / Σ_m N_m exp(o_m)`, so the classifier is supervised
//! as if the prior were uniform; with equal counts it reduces to the plain
//! softmax exactly. Hard-class mining restricts the same assignment to the
//! target class plus the highest-logit competitors.
//!
//! The contrastive kernel scores each sample's view-1 projection against all
//! other view projections of the batch and, in balanced mode, against one
//! trainable anchor per class. Anchor terms are scored against the
//! unprojected view-1 embedding. Pair positives carry weight `alpha`, the
//! anchor carries weight 1; restricted supports are handled with additive
//! masks of `-1e30`, which contribute exactly zero probability mass and
//! exactly zero gradient in double precision.

use crate::tensor::{log_sum_exp_with_prior, Tape, TensorError, TensorId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Additive mask that removes an entry from a log-sum-exp support.
pub(crate) const NEG_MASK: f64 = -1e30;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("pair weight alpha must be in [0, 1], got {0}")]
    BadAlpha(f64),
    #[error("hard class count must be in [1, {max}], got {got}")]
    BadHardCount { max: usize, got: usize },
    #[error("class prior needs positive counts, got {0:?}")]
    BadPrior(Vec<usize>),
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, LossError>;

/// Temperature and positive-pair weight of the balanced contrastive loss.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct BclConfig {
    pub tau: f64,
    pub alpha: f64,
}

impl Default for BclConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            alpha: 0.05,
        }
    }
}

impl BclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(LossError::BadTemperature(self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::BadAlpha(self.alpha));
        }
        Ok(())
    }
}

/// Training-split class counts, fixed for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    counts: Vec<usize>,
    log_counts: Vec<f64>,
}

impl ClassPrior {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(LossError::BadPrior(counts));
        }
        let log_counts = counts.iter().map(|&c| (c as f64).ln()).collect();
        Ok(Self { counts, log_counts })
    }

    /// A flat prior: the balanced probability becomes the plain softmax,
    /// bit for bit, because every log count is exactly zero.
    pub fn uniform(classes: usize) -> Self {
        Self {
            counts: vec![1; classes],
            log_counts: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn log_counts(&self) -> &[f64] {
        &self.log_counts
    }
}

/// The target class plus the most confusable competitors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardClassSet {
    pub target: usize,
    /// Sorted member classes, always containing `target`.
    pub members: Vec<usize>,
}

impl HardClassSet {
    pub fn contains(&self, class: usize) -> bool {
        self.members.binary_search(&class).is_ok()
    }
}

/// Select the `m_hard` non-target classes with the largest logits, ties
/// broken toward the lower class index, and join the target.
pub fn mine_hard_classes(logits: &[f64], target: usize, m_hard: usize) -> Result<HardClassSet> {
    let classes = logits.len();
    if target >= classes {
        return Err(LossError::BadLabel {
            label: target,
            classes,
        });
    }
    if m_hard == 0 || m_hard > classes.saturating_sub(1) {
        return Err(LossError::BadHardCount {
            max: classes.saturating_sub(1),
            got: m_hard,
        });
    }
    let mut rest: Vec<usize> = (0..classes).filter(|&j| j != target).collect();
    rest.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let mut members: Vec<usize> = rest.into_iter().take(m_hard).collect();
    members.push(target);
    members.sort_unstable();
    Ok(HardClassSet { target, members })
}

/// `p_j = N_j exp(o_j) / Σ_m N_m exp(o_m)`, computed through the stable
/// log-sum-exp kernel.
pub fn balanced_probability(logits: &[f64], prior: &ClassPrior) -> Result<Vec<f64>> {
    if logits.len() != prior.classes() {
        return Err(LossError::LengthMismatch {
            what: "logits",
            expected: prior.classes(),
            got: logits.len(),
        });
    }
    let lse = log_sum_exp_with_prior(logits, prior.log_counts())?;
    Ok(logits
        .iter()
        .zip(prior.log_counts())
        .map(|(&o, &ln_n)| (o + ln_n - lse).exp())
        .collect())
}

/// Balanced probabilities restricted and renormalized to a hard-class set.
#[derive(Debug, Clone)]
pub struct HardProbs {
    pub members: Vec<usize>,
    pub probs: Vec<f64>,
}

impl HardProbs {
    /// Probability of a member class; `None` for classes outside the set.
    pub fn get(&self, class: usize) -> Option<f64> {
        self.members
            .iter()
            .position(|&m| m == class)
            .map(|i| self.probs[i])
    }
}

/// `p̃_j = N_j exp(o_j) / Σ_{m∈Ω} N_m exp(o_m)` for `j ∈ Ω`.
pub fn hard_balanced_probability(
    logits: &[f64],
    prior: &ClassPrior,
    set: &HardClassSet,
) -> Result<HardProbs> {
    if logits.len() != prior.classes() {
        return Err(LossError::LengthMismatch {
            what: "logits",
            expected: prior.classes(),
            got: logits.len(),
        });
    }
    debug_assert!(
        set.members.len() >= 2,
        "a hard set always holds the target plus at least one competitor"
    );
    let sub_logits: Vec<f64> = set.members.iter().map(|&j| logits[j]).collect();
    let sub_prior: Vec<f64> = set.members.iter().map(|&j| prior.log_counts()[j]).collect();
    let lse = log_sum_exp_with_prior(&sub_logits, &sub_prior)?;
    let probs = sub_logits
        .iter()
        .zip(&sub_prior)
        .map(|(&o, &ln_n)| (o + ln_n - lse).exp())
        .collect();
    Ok(HardProbs {
        members: set.members.clone(),
        probs,
    })
}

/// `S = −(log p_y + log p̃_y)`: global plus hard-restricted negative
/// log-likelihood. The hard set is mined from the same logits and treated as
/// a constant of the step.
pub fn individual_supervised_loss(
    logits: &[f64],
    target: usize,
    prior: &ClassPrior,
    m_hard: usize,
) -> Result<f64> {
    let set = mine_hard_classes(logits, target, m_hard)?;
    let global = balanced_probability(logits, prior)?;
    let hard = hard_balanced_probability(logits, prior, &set)?;
    Ok(-(global[target].ln() + hard.get(target).expect("target is always a member").ln()))
}

/// Batched supervised loss on the tape.
pub struct SupervisedBatch {
    /// `[B×1]` per-sample loss `S_i`.
    pub loss: TensorId,
    /// `[B×M]` logits plus log class counts, the shared input of every
    /// balanced assignment over this batch.
    pub shifted: TensorId,
    /// `[B×M]` global balanced log-probabilities.
    pub log_probs: TensorId,
    /// Hard-restricted quantities; absent when mining is disabled.
    pub hard: Option<HardBatch>,
}

pub struct HardBatch {
    pub sets: Vec<HardClassSet>,
    /// `[B×M]` log-probabilities renormalized over each row's hard set;
    /// entries outside the set are masked to `-1e30` and must only be used
    /// under a support mask.
    pub log_probs: TensorId,
    /// Row-major `[B×M]` additive support mask: 0 inside the set, `-1e30`
    /// outside. Reusable to renormalize another expert's logits over the
    /// same support.
    pub support_mask: Vec<f64>,
}

/// Per-sample supervised loss over a logit batch. With `m_hard = None` the
/// loss is the global term alone.
pub fn supervised_loss_batch(
    tape: &mut Tape,
    logits: TensorId,
    labels: &[usize],
    prior: &ClassPrior,
    m_hard: Option<usize>,
) -> Result<SupervisedBatch> {
    let (batch, classes) = tape.shape(logits);
    if classes != prior.classes() {
        return Err(LossError::LengthMismatch {
            what: "logit width",
            expected: prior.classes(),
            got: classes,
        });
    }
    if labels.len() != batch {
        return Err(LossError::LengthMismatch {
            what: "labels",
            expected: batch,
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(LossError::BadLabel {
            label: bad,
            classes,
        });
    }

    let log_counts = tape.leaf(prior.log_counts().to_vec(), 1, classes)?;
    let shifted = tape.add_row(logits, log_counts)?;
    let lse = tape.log_sum_exp_rows(shifted)?;
    let log_probs = tape.sub_col(shifted, lse)?;

    let mut one_hot = vec![0.0; batch * classes];
    for (i, &y) in labels.iter().enumerate() {
        one_hot[i * classes + y] = 1.0;
    }
    let one_hot_t = tape.leaf(one_hot, batch, classes)?;
    let target_global = {
        let masked = tape.mul(log_probs, one_hot_t)?;
        tape.sum_rows(masked)?
    };

    let hard = match m_hard {
        None => None,
        Some(m_hard) => {
            let raw = tape.values(logits).to_vec();
            let mut sets = Vec::with_capacity(batch);
            let mut support_mask = vec![NEG_MASK; batch * classes];
            for (i, &y) in labels.iter().enumerate() {
                let set = mine_hard_classes(&raw[i * classes..(i + 1) * classes], y, m_hard)?;
                for &j in &set.members {
                    support_mask[i * classes + j] = 0.0;
                }
                sets.push(set);
            }
            let mask_t = tape.leaf(support_mask.clone(), batch, classes)?;
            let masked = tape.add(shifted, mask_t)?;
            let lse_hard = tape.log_sum_exp_rows(masked)?;
            let log_probs_hard = tape.sub_col(masked, lse_hard)?;
            Some(HardBatch {
                sets,
                log_probs: log_probs_hard,
                support_mask,
            })
        }
    };

    let total_target = match &hard {
        None => target_global,
        Some(h) => {
            let masked = tape.mul(h.log_probs, one_hot_t)?;
            let target_hard = tape.sum_rows(masked)?;
            tape.add(target_global, target_hard)?
        }
    };
    let loss = tape.scale(total_target, -1.0)?;
    Ok(SupervisedBatch {
        loss,
        shifted,
        log_probs,
        hard,
    })
}

/// Which positives and references the contrastive kernel uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ContrastMode {
    /// Pair positives weighted by `alpha` plus one anchor per class in both
    /// the numerator and the candidate set.
    Balanced { tau: f64, alpha: f64 },
    /// All same-label pairs with weight 1, no anchors.
    SupervisedUnbalanced { tau: f64 },
    /// Only the sample's own second view is positive, no anchors.
    Unsupervised { tau: f64 },
}

impl ContrastMode {
    fn tau(&self) -> f64 {
        match *self {
            ContrastMode::Balanced { tau, .. }
            | ContrastMode::SupervisedUnbalanced { tau }
            | ContrastMode::Unsupervised { tau } => tau,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau() > 0.0) {
            return Err(LossError::BadTemperature(self.tau()));
        }
        if let ContrastMode::Balanced { alpha, .. } = *self {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(LossError::BadAlpha(alpha));
            }
        }
        Ok(())
    }
}

/// Per-sample contrastive loss `[B×1]` with both views labeled by `labels`.
///
/// `z1`, `z2` are the projected (unit-norm) views, `h1` the unprojected
/// view-1 embeddings used for anchor scores. `anchors` is ignored outside
/// balanced mode.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss_batch(
    tape: &mut Tape,
    z1: TensorId,
    z2: TensorId,
    h1: TensorId,
    anchors: TensorId,
    labels: &[usize],
    mode: ContrastMode,
) -> Result<TensorId> {
    contrastive_loss_with_view_labels(tape, z1, z2, h1, anchors, labels, labels, mode)
}

/// Generalized kernel with separately labeled views. The candidate set for
/// row `i` is every view embedding except `z1[i]` itself, plus the anchors
/// in balanced mode; positives are the same-label candidates.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss_with_view_labels(
    tape: &mut Tape,
    z1: TensorId,
    z2: TensorId,
    h1: TensorId,
    anchors: TensorId,
    labels1: &[usize],
    labels2: &[usize],
    mode: ContrastMode,
) -> Result<TensorId> {
    mode.validate()?;
    let (batch, _zdim) = tape.shape(z1);
    if tape.shape(z2) != tape.shape(z1) {
        let (r, c) = tape.shape(z2);
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            lhs: tape.shape(z1),
            rhs: (r, c),
        }));
    }
    for (what, l) in [("labels1", labels1), ("labels2", labels2)] {
        if l.len() != batch {
            return Err(LossError::LengthMismatch {
                what,
                expected: batch,
                got: l.len(),
            });
        }
    }
    let classes = tape.shape(anchors).0;
    let inv_tau = 1.0 / mode.tau();

    let s11 = tape.matmul_t(z1, z1)?;
    let s11 = tape.scale(s11, inv_tau)?;
    let mut diag = vec![0.0; batch * batch];
    for i in 0..batch {
        diag[i * batch + i] = NEG_MASK;
    }
    let diag_t = tape.leaf(diag, batch, batch)?;
    let s11 = tape.add(s11, diag_t)?;

    let s12 = tape.matmul_t(z1, z2)?;
    let s12 = tape.scale(s12, inv_tau)?;

    let with_anchors = matches!(mode, ContrastMode::Balanced { .. });
    let scores = if with_anchors {
        let sa = tape.matmul_t(h1, anchors)?;
        let sa = tape.scale(sa, inv_tau)?;
        tape.concat_cols(&[s11, s12, sa])?
    } else {
        tape.concat_cols(&[s11, s12])?
    };

    let width = 2 * batch + if with_anchors { classes } else { 0 };
    let mut weights = vec![0.0; batch * width];
    let mut coef = vec![0.0; batch];
    for i in 0..batch {
        let yi = labels1[i];
        if yi >= classes && with_anchors {
            return Err(LossError::BadLabel { label: yi, classes });
        }
        match mode {
            ContrastMode::Balanced { alpha, .. } => {
                let mut positives = 0usize;
                for (j, &yj) in labels1.iter().enumerate() {
                    if j != i && yj == yi {
                        weights[i * width + j] = alpha;
                        positives += 1;
                    }
                }
                for (j, &yj) in labels2.iter().enumerate() {
                    if yj == yi {
                        weights[i * width + batch + j] = alpha;
                        positives += 1;
                    }
                }
                weights[i * width + 2 * batch + yi] = 1.0;
                coef[i] = alpha * positives as f64 + 1.0;
            }
            ContrastMode::SupervisedUnbalanced { .. } => {
                let mut positives = 0usize;
                for (j, &yj) in labels1.iter().enumerate() {
                    if j != i && yj == yi {
                        weights[i * width + j] = 1.0;
                        positives += 1;
                    }
                }
                for (j, &yj) in labels2.iter().enumerate() {
                    if yj == yi {
                        weights[i * width + batch + j] = 1.0;
                        positives += 1;
                    }
                }
                coef[i] = positives as f64;
            }
            ContrastMode::Unsupervised { .. } => {
                weights[i * width + batch + i] = 1.0;
                coef[i] = 1.0;
            }
        }
    }

    let lse = tape.log_sum_exp_rows(scores)?;
    let weights_t = tape.leaf(weights, batch, width)?;
    let weighted = tape.mul(scores, weights_t)?;
    let positive_sum = tape.sum_rows(weighted)?;
    let coef_t = tape.leaf(coef, batch, 1)?;
    let lse_weighted = tape.mul(coef_t, lse)?;
    Ok(tape.sub(lse_weighted, positive_sum)?)
}

/// The spec-shaped single-sample entry point: the balanced contrastive loss
/// of batch element `i` as a scalar node.
#[allow(clippy::too_many_arguments)]
pub fn balanced_contrastive_loss(
    tape: &mut Tape,
    i: usize,
    z1: TensorId,
    z2: TensorId,
    h1: TensorId,
    anchors: TensorId,
    labels: &[usize],
    cfg: &BclConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let all = contrastive_loss_batch(
        tape,
        z1,
        z2,
        h1,
        anchors,
        labels,
        ContrastMode::Balanced {
            tau: cfg.tau,
            alpha: cfg.alpha,
        },
    )?;
    Ok(tape.gather_rows(all, &[i])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn balanced_probability_examples() {
        let prior = ClassPrior::from_counts(vec![3, 1]).unwrap();
        let p = balanced_probability(&[0.0, 0.0], &prior).unwrap();
        assert!(close(p[0], 0.75, 1e-12) && close(p[1], 0.25, 1e-12));

        let prior = ClassPrior::from_counts(vec![2, 1]).unwrap();
        let p = balanced_probability(&[2.0f64.ln(), 4.0f64.ln()], &prior).unwrap();
        assert!(close(p[0], 0.5, 1e-12) && close(p[1], 0.5, 1e-12));
    }

    #[test]
    fn equal_counts_degenerate_to_softmax() {
        let logits = [0.3, -1.0, 2.5, 0.0];
        let prior = ClassPrior::from_counts(vec![7, 7, 7, 7]).unwrap();
        let p = balanced_probability(&logits, &prior).unwrap();
        let lse = crate::tensor::log_sum_exp(&logits);
        for (j, &o) in logits.iter().enumerate() {
            assert!(close(p[j], (o - lse).exp(), 1e-12));
        }
    }

    #[test]
    fn lse_prior_route_matches_negative_log_probability() {
        // Two routes to the same number: the stable kernel minus the shifted
        // logit, and the negative log of the balanced assignment.
        use crate::tensor::log_sum_exp_with_prior;
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let m = rng.gen_range(2..9);
            let counts: Vec<usize> = (0..m).map(|_| rng.gen_range(1..60)).collect();
            let prior = ClassPrior::from_counts(counts).unwrap();
            let logits: Vec<f64> = (0..m).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let lse = log_sum_exp_with_prior(&logits, prior.log_counts()).unwrap();
            let p = balanced_probability(&logits, &prior).unwrap();
            for j in 0..m {
                let via_lse = lse - prior.log_counts()[j] - logits[j];
                assert!(close(via_lse, -p[j].ln(), 1e-12));
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_shift_invariant() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let m = rng.gen_range(2..9);
            let counts: Vec<usize> = (0..m).map(|_| rng.gen_range(1..50)).collect();
            let prior = ClassPrior::from_counts(counts).unwrap();
            let logits: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let p = balanced_probability(&logits, &prior).unwrap();
            assert!(close(p.iter().sum::<f64>(), 1.0, 1e-12));
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));

            let c = rng.gen_range(-3.0..3.0);
            let shifted: Vec<f64> = logits.iter().map(|&o| o + c).collect();
            let q = balanced_probability(&shifted, &prior).unwrap();
            for j in 0..m {
                assert!(close(p[j], q[j], 1e-12));
            }
        }
    }

    #[test]
    fn hard_class_mining_examples() {
        let set = mine_hard_classes(&[5.0, 1.0, 3.0, 2.0], 1, 2).unwrap();
        assert_eq!(set.members, vec![0, 1, 2]);

        let set = mine_hard_classes(&[5.0, 1.0, 3.0, 2.0], 1, 3).unwrap();
        assert_eq!(set.members, vec![0, 1, 2, 3]);

        // All logits equal: tie broken toward the lower index.
        let set = mine_hard_classes(&[1.0, 1.0, 1.0], 2, 1).unwrap();
        assert_eq!(set.members, vec![0, 2]);

        assert!(mine_hard_classes(&[1.0, 2.0], 0, 2).is_err());
        assert!(mine_hard_classes(&[1.0, 2.0], 0, 0).is_err());
    }

    #[test]
    fn hard_probability_examples() {
        let prior = ClassPrior::from_counts(vec![1, 1, 1]).unwrap();
        let set = mine_hard_classes(&[0.0, 10.0, 0.0], 0, 1).unwrap();
        assert_eq!(set.members, vec![0, 1]);
        let hp = hard_balanced_probability(&[0.0, 10.0, 0.0], &prior, &set).unwrap();
        assert!(close(
            hp.get(0).unwrap(),
            1.0 / (1.0 + 10.0f64.exp()),
            1e-15
        ));
        assert!(hp.get(2).is_none());
        assert!(close(hp.probs.iter().sum::<f64>(), 1.0, 1e-12));

        // Full support equals the global assignment.
        let prior = ClassPrior::from_counts(vec![4, 2, 1]).unwrap();
        let logits = [0.4, -0.2, 1.1];
        let set = mine_hard_classes(&logits, 1, 2).unwrap();
        let hp = hard_balanced_probability(&logits, &prior, &set).unwrap();
        let global = balanced_probability(&logits, &prior).unwrap();
        for j in 0..3 {
            assert!(close(hp.get(j).unwrap(), global[j], 1e-12));
        }
    }

    #[test]
    fn supervised_loss_examples() {
        // Two classes: the hard support is the full support, S = -2 log p_y.
        let prior = ClassPrior::from_counts(vec![3, 2]).unwrap();
        let logits = [0.7, -0.3];
        let s = individual_supervised_loss(&logits, 0, &prior, 1).unwrap();
        let p = balanced_probability(&logits, &prior).unwrap();
        assert!(close(s, -2.0 * p[0].ln(), 1e-12));

        // Uniform scores over three classes.
        let prior = ClassPrior::from_counts(vec![1, 1, 1]).unwrap();
        let s = individual_supervised_loss(&[0.0, 0.0, 0.0], 0, &prior, 1).unwrap();
        assert!(close(s, 3.0f64.ln() + 2.0f64.ln(), 1e-12));

        // A dominant correct logit drives the loss to zero.
        let s = individual_supervised_loss(&[60.0, 0.0, 0.0], 0, &prior, 1).unwrap();
        assert!(s < 1e-10);
    }

    #[test]
    fn anchor_weighting_shrinks_the_head_tail_gap() {
        // At the minimizer, the positive-pair probability is 1/(W + 1/alpha)
        // instead of 1/W; the spread between a tail sample (few positives)
        // and a head sample (many) must shrink for every weight in (0, 1].
        for wt in 1..8usize {
            for wh in wt + 1..9usize {
                for &alpha in &[0.01, 0.05, 0.2, 0.5, 1.0] {
                    let plain = 1.0 / wt as f64 - 1.0 / wh as f64;
                    let anchored =
                        1.0 / (wt as f64 + 1.0 / alpha) - 1.0 / (wh as f64 + 1.0 / alpha);
                    assert!(
                        anchored < plain,
                        "wt={wt} wh={wh} alpha={alpha}: {anchored} !< {plain}"
                    );
                }
            }
        }
    }

    #[test]
    fn batched_supervised_loss_matches_scalar_kernel() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let (batch, classes, m_hard) = (6, 5, 2);
        let prior = ClassPrior::from_counts(vec![20, 9, 4, 2, 1]).unwrap();
        let logits: Vec<f64> = (0..batch * classes)
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();

        let mut tape = Tape::new();
        let o = tape.leaf(logits.clone(), batch, classes).unwrap();
        let out = supervised_loss_batch(&mut tape, o, &labels, &prior, Some(m_hard)).unwrap();
        let batched = tape.values(out.loss).to_vec();
        for i in 0..batch {
            let expected = individual_supervised_loss(
                &logits[i * classes..(i + 1) * classes],
                labels[i],
                &prior,
                m_hard,
            )
            .unwrap();
            assert!(close(batched[i], expected, 1e-10), "row {i}");
        }
    }

    #[test]
    fn contrastive_uniform_scores_anchor_only_case() {
        // B = 2, all pairwise scores zero, two anchors, tau = 1, and view
        // labels arranged so row 0 has no pair positives: the loss is the
        // anchor term alone, -log(1/5).
        let mut tape = Tape::new();
        // Orthogonal unit rows so every cross score is zero.
        let z1 = tape
            .leaf(
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                2,
                6,
            )
            .unwrap();
        let z2 = tape
            .leaf(
                vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                2,
                6,
            )
            .unwrap();
        let h1 = tape
            .leaf(
                vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
                2,
                6,
            )
            .unwrap();
        let anchors = tape
            .leaf(
                vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                2,
                6,
            )
            .unwrap();
        let loss = contrastive_loss_with_view_labels(
            &mut tape,
            z1,
            z2,
            h1,
            anchors,
            &[0, 1],
            &[1, 1],
            ContrastMode::Balanced {
                tau: 1.0,
                alpha: 0.05,
            },
        )
        .unwrap();
        assert!(close(tape.values(loss)[0], 5.0f64.ln(), 1e-12));
    }

    #[test]
    fn alpha_zero_ignores_pair_positives() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (batch, dim, classes) = (4, 5, 3);
        let unit_rows = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..batch * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for i in 0..batch {
                let row = &mut v[i * dim..(i + 1) * dim];
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                row.iter_mut().for_each(|x| *x /= n);
            }
            v
        };
        let (z1v, z2v, h1v) = (
            unit_rows(&mut rng),
            unit_rows(&mut rng),
            unit_rows(&mut rng),
        );
        let av: Vec<f64> = (0..classes * dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let run = |labels1: &[usize], labels2: &[usize]| -> Vec<f64> {
            let mut tape = Tape::new();
            let z1 = tape.leaf(z1v.clone(), batch, dim).unwrap();
            let z2 = tape.leaf(z2v.clone(), batch, dim).unwrap();
            let h1 = tape.leaf(h1v.clone(), batch, dim).unwrap();
            let a = tape.leaf(av.clone(), classes, dim).unwrap();
            let loss = contrastive_loss_with_view_labels(
                &mut tape,
                z1,
                z2,
                h1,
                a,
                labels1,
                labels2,
                ContrastMode::Balanced {
                    tau: 0.5,
                    alpha: 0.0,
                },
            )
            .unwrap();
            tape.values(loss).to_vec()
        };
        // Same targets for each row: changing which other views share the
        // label must not move the loss when alpha is zero.
        let a = run(&[0, 1, 2, 0], &[0, 1, 2, 0]);
        let b = run(&[0, 1, 2, 0], &[2, 0, 1, 1]);
        for i in 0..batch {
            assert!(close(a[i], b[i], 1e-12), "row {i}");
        }
    }

    #[test]
    fn single_sample_entry_point_matches_batch_row() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let (batch, dim, classes) = (3, 4, 2);
        let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let (z1v, z2v, h1v) = (
            rand_mat(&mut rng, batch * dim),
            rand_mat(&mut rng, batch * dim),
            rand_mat(&mut rng, batch * dim),
        );
        let av = rand_mat(&mut rng, classes * dim);
        let labels = [0usize, 1, 0];
        let cfg = BclConfig::default();

        let mut tape = Tape::new();
        let z1 = tape.leaf(z1v.clone(), batch, dim).unwrap();
        let z2 = tape.leaf(z2v.clone(), batch, dim).unwrap();
        let h1 = tape.leaf(h1v.clone(), batch, dim).unwrap();
        let a = tape.leaf(av.clone(), classes, dim).unwrap();
        let full = contrastive_loss_batch(
            &mut tape,
            z1,
            z2,
            h1,
            a,
            &labels,
            ContrastMode::Balanced {
                tau: cfg.tau,
                alpha: cfg.alpha,
            },
        )
        .unwrap();
        let row1 = balanced_contrastive_loss(&mut tape, 1, z1, z2, h1, a, &labels, &cfg).unwrap();
        assert!(close(tape.values(full)[1], tape.values(row1)[0], 0.0));
    }

    #[test]
    fn bcl_and_supervised_gradients_match_finite_differences() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let (batch, dim, classes) = (3, 4, 3);
        let labels = [0usize, 2, 0];

        let z1 = (
            (0..batch * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (batch, dim),
        );
        let z2 = (
            (0..batch * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (batch, dim),
        );
        let h1 = (
            (0..batch * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (batch, dim),
        );
        let anchors = (
            (0..classes * dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            (classes, dim),
        );
        let mut build =
            |t: &mut Tape, ids: &[TensorId]| -> std::result::Result<TensorId, TensorError> {
                let loss = contrastive_loss_batch(
                    t,
                    ids[0],
                    ids[1],
                    ids[2],
                    ids[3],
                    &labels,
                    ContrastMode::Balanced {
                        tau: 0.5,
                        alpha: 0.3,
                    },
                )
                .map_err(|e| match e {
                    LossError::Tensor(t) => t,
                    other => TensorError::Invalid {
                        op: "contrastive",
                        msg: other.to_string(),
                    },
                })?;
                t.sum_all(loss)
            };
        let out =
            gradcheck::check_gradients(&mut build, &[z1, z2, h1, anchors], gradcheck::DEFAULT_EPS)
                .unwrap();
        assert!(
            out.passes(gradcheck::DEFAULT_TOL),
            "bcl gradient error {:.3e}",
            out.max_err
        );

        let prior = ClassPrior::from_counts(vec![9, 3, 1]).unwrap();
        let logits = (
            (0..batch * classes)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect(),
            (batch, classes),
        );
        let mut build =
            |t: &mut Tape, ids: &[TensorId]| -> std::result::Result<TensorId, TensorError> {
                let out = supervised_loss_batch(t, ids[0], &labels, &prior, Some(1)).map_err(
                    |e| match e {
                        LossError::Tensor(t) => t,
                        other => TensorError::Invalid {
                            op: "supervised",
                            msg: other.to_string(),
                        },
                    },
                )?;
                t.sum_all(out.loss)
            };
        let out =
            gradcheck::check_gradients(&mut build, &[logits], gradcheck::DEFAULT_EPS).unwrap();
        assert!(
            out.passes(gradcheck::DEFAULT_TOL),
            "supervised gradient error {:.3e}",
            out.max_err
        );
    }
}
