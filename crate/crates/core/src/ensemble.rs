//! Multi-expert gating, loss fusion, disentangled inter-expert distillation,
//! the total objective, and test-time fusion.
//!
//! Gating scores each expert by the similarity between its logit vector and
//! a trainable prototype, softmaxed over experts at temperature `kappa`.
//! The fusion loss is the gating-weighted sum of per-expert supervised and
//! contrastive losses, averaged over the batch.
//!
//! Distillation uses a disentangled divergence: the KL between two experts'
//! assignments splits exactly into a binary target-vs-rest KL plus the
//! non-target conditional KL weighted by `1 − p_y`. Replacing that coupled
//! weight with free coefficients `(beta1, beta2)` decouples target and
//! non-target knowledge transfer; restoring `beta1 = 1, beta2 = 1 − p_y`
//! recovers the plain KL bit for bit, which the tests exploit.

use crate::losses::{LossError, SupervisedBatch};
use crate::tensor::{log_sum_exp, Tape, TensorError, TensorId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability floor applied before logs and divisions of `1 − p_y`; only
/// active when a softmax saturates.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("gating temperature must be positive, got {0}")]
    BadKappa(f64),
    #[error("{what}: expected {expected} entries, got {got}")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("probabilities must be strictly positive and sum to 1")]
    BadDistribution,
    #[error("hard-restricted quantities are required for hard distillation")]
    MissingHard,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

type Result<T> = std::result::Result<T, EnsembleError>;

/// Gating and fusion weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct FusionConfig {
    /// Weight of the contrastive term inside the fusion loss.
    pub eta: f64,
    /// Gating softmax temperature.
    pub kappa: f64,
    /// Score experts by cosine similarity (normalized logits and prototype)
    /// rather than the raw dot product.
    pub cosine_gating: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            kappa: 0.1,
            cosine_gating: true,
        }
    }
}

/// How expert `q`'s assignment is restricted when distilling against expert
/// `k`'s hard set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HardSupportMode {
    /// Renormalize `q` over `k`'s hard set.
    FirstArgument,
    /// Renormalize both experts over the intersection of their hard sets.
    Intersection,
}

/// Which divergence drives inter-expert distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    /// `beta1 · KL(b_k ‖ b_q) + beta2 · KL(nt_k ‖ nt_q)`.
    Disentangled,
    /// Plain KL: `beta1 = 1` with the coupled `1 − p_y` non-target weight.
    ClassicKl,
    /// Target-class binary KL only.
    TargetOnly,
    /// Non-target conditional KL only.
    NonTargetOnly,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default)]
pub struct DistillConfig {
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the inter-expert loss in the total objective.
    pub epsilon: f64,
    pub mode: DistillMode,
    /// Stop gradients into the second argument of each divergence.
    pub detach_teacher: bool,
    pub hard_support: HardSupportMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            epsilon: 0.6,
            mode: DistillMode::Disentangled,
            detach_teacher: false,
            hard_support: HardSupportMode::FirstArgument,
        }
    }
}

/// Softmax over experts of per-sample similarity scores `[B×K]`.
pub fn gating_from_similarities(tape: &mut Tape, sims: TensorId, kappa: f64) -> Result<TensorId> {
    if !(kappa > 0.0) {
        return Err(EnsembleError::BadKappa(kappa));
    }
    let scaled = tape.scale(sims, 1.0 / kappa)?;
    let lse = tape.log_sum_exp_rows(scaled)?;
    let logw = tape.sub_col(scaled, lse)?;
    Ok(tape.exp(logw)?)
}

/// Per-sample expert weights `[B×K]` from each expert's logits and gating
/// prototype. Rows sum to 1.
pub fn gating_weights(
    tape: &mut Tape,
    logits: &[TensorId],
    prototypes: &[TensorId],
    cfg: &FusionConfig,
) -> Result<TensorId> {
    if logits.is_empty() || logits.len() != prototypes.len() {
        return Err(EnsembleError::CountMismatch {
            what: "gating prototypes",
            expected: logits.len(),
            got: prototypes.len(),
        });
    }
    let (batch, _) = tape.shape(logits[0]);
    let ones = tape.leaf(vec![1.0; batch], batch, 1)?;
    let mut sims = Vec::with_capacity(logits.len());
    for (&o, &proto) in logits.iter().zip(prototypes) {
        let (o_hat, p_hat) = if cfg.cosine_gating {
            (tape.l2_normalize_rows(o)?, tape.l2_normalize_rows(proto)?)
        } else {
            (o, proto)
        };
        let tiled = tape.matmul(ones, p_hat)?;
        sims.push(tape.dot_rows(o_hat, tiled)?);
    }
    let sims = tape.concat_cols(&sims)?;
    gating_from_similarities(tape, sims, cfg.kappa)
}

/// Constant uniform weights `1/K`, the ablation replacement for gating.
pub fn uniform_gating(tape: &mut Tape, batch: usize, experts: usize) -> Result<TensorId> {
    Ok(tape.leaf(vec![1.0 / experts as f64; batch * experts], batch, experts)?)
}

/// The fusion loss and its two components, each a `[1×1]` batch mean.
pub struct FusionParts {
    pub fusion: TensorId,
    pub fused_supervised: TensorId,
    pub fused_contrastive: Option<TensorId>,
}

/// `Σ_i Σ_k w_ik (S_i^k + eta · C_i^k)` as a batch mean. Gradients flow into
/// the gating weights.
pub fn fusion_loss(
    tape: &mut Tape,
    gating: TensorId,
    supervised: &[TensorId],
    contrastive: Option<&[TensorId]>,
    eta: f64,
) -> Result<FusionParts> {
    let (batch, experts) = tape.shape(gating);
    if supervised.len() != experts {
        return Err(EnsembleError::CountMismatch {
            what: "supervised losses",
            expected: experts,
            got: supervised.len(),
        });
    }
    let mean_weighted = |tape: &mut Tape, cols: &[TensorId]| -> Result<TensorId> {
        let stacked = tape.concat_cols(cols)?;
        let weighted = tape.mul(gating, stacked)?;
        let per_sample = tape.sum_rows(weighted)?;
        let total = tape.sum_all(per_sample)?;
        Ok(tape.scale(total, 1.0 / batch as f64)?)
    };
    let fused_supervised = mean_weighted(tape, supervised)?;
    let fused_contrastive = match contrastive {
        None => None,
        Some(c) => {
            if c.len() != experts {
                return Err(EnsembleError::CountMismatch {
                    what: "contrastive losses",
                    expected: experts,
                    got: c.len(),
                });
            }
            Some(mean_weighted(tape, c)?)
        }
    };
    let fusion = match fused_contrastive {
        Some(fcl) => {
            let scaled = tape.scale(fcl, eta)?;
            tape.add(fused_supervised, scaled)?
        }
        None => fused_supervised,
    };
    Ok(FusionParts {
        fusion,
        fused_supervised,
        fused_contrastive,
    })
}

/// `L = fusion + epsilon · inter`.
pub fn total_loss(
    tape: &mut Tape,
    fusion: TensorId,
    inter: TensorId,
    epsilon: f64,
) -> Result<TensorId> {
    let scaled = tape.scale(inter, epsilon)?;
    Ok(tape.add(fusion, scaled)?)
}

/// Average the experts' logits and softmax the result. Gating is not used at
/// test time.
pub fn fused_inference(per_expert_logits: &[Vec<f64>]) -> Result<Vec<f64>> {
    let experts = per_expert_logits.len();
    if experts == 0 {
        return Err(EnsembleError::CountMismatch {
            what: "expert logits",
            expected: 1,
            got: 0,
        });
    }
    let classes = per_expert_logits[0].len();
    let mut avg = vec![0.0; classes];
    for row in per_expert_logits {
        if row.len() != classes {
            return Err(EnsembleError::CountMismatch {
                what: "logit width",
                expected: classes,
                got: row.len(),
            });
        }
        for (a, &v) in avg.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in &mut avg {
        *a /= experts as f64;
    }
    let lse = log_sum_exp(&avg);
    Ok(avg.iter().map(|&o| (o - lse).exp()).collect())
}

/// Index of the largest probability, ties toward the lower class.
pub fn predict(probs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = j;
        }
    }
    best
}

fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|&v| v <= 0.0) {
        return Err(EnsembleError::BadDistribution);
    }
    if (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(EnsembleError::BadDistribution);
    }
    Ok(())
}

/// Both sides of the target/non-target KL split, for the identity check:
/// `KL(p‖q)` and `KL(b_p‖b_q) + (1−p_y)·KL(p̆‖q̆)`.
pub fn kl_decomposition_check(p: &[f64], q: &[f64], target: usize) -> Result<(f64, f64)> {
    validate_distribution(p)?;
    validate_distribution(q)?;
    if p.len() != q.len() || target >= p.len() {
        return Err(EnsembleError::BadDistribution);
    }
    let lhs: f64 = p.iter().zip(q).map(|(&pj, &qj)| pj * (pj / qj).ln()).sum();

    let (py, qy) = (p[target], q[target]);
    let kl_binary = py * (py / qy).ln() + (1.0 - py) * ((1.0 - py) / (1.0 - qy)).ln();
    let mut kl_rest = 0.0;
    for j in 0..p.len() {
        if j != target {
            let pr = p[j] / (1.0 - py);
            let qr = q[j] / (1.0 - qy);
            kl_rest += pr * (pr / qr).ln();
        }
    }
    Ok((lhs, kl_binary + (1.0 - py) * kl_rest))
}

/// Reference disentangled divergence on plain slices:
/// `beta1·KL(b_p‖b_q) + beta2·KL(p̆‖q̆)`.
pub fn dkl_value(p: &[f64], q: &[f64], target: usize, beta1: f64, beta2: f64) -> Result<f64> {
    validate_distribution(p)?;
    validate_distribution(q)?;
    if p.len() != q.len() || target >= p.len() {
        return Err(EnsembleError::BadDistribution);
    }
    let (py, qy) = (p[target], q[target]);
    let kl_binary = py * (py / qy).ln() + (1.0 - py) * ((1.0 - py) / (1.0 - qy)).ln();
    let mut kl_rest = 0.0;
    for j in 0..p.len() {
        if j != target {
            let pr = p[j] / (1.0 - py);
            let qr = q[j] / (1.0 - qy);
            kl_rest += pr * (pr / qr).ln();
        }
    }
    Ok(beta1 * kl_binary + beta2 * kl_rest)
}

/// Per-sample disentangled divergence `[B×1]` between two experts' log
/// assignments over a shared support.
///
/// `log_p_k` / `log_p_q` are `[B×M]` log-probabilities; entries outside the
/// support must carry the additive `NEG_MASK` convention. `nt_mask` is 1 on
/// in-support non-target entries and 0 elsewhere. `coupled_beta2` replaces
/// the fixed `beta2` with the per-sample weight `1 − p_y^k`, which restores
/// the plain KL when `beta1 = 1`.
#[allow(clippy::too_many_arguments)]
fn dkl_pair(
    tape: &mut Tape,
    log_p_k: TensorId,
    log_p_q: TensorId,
    one_hot: TensorId,
    nt_mask: TensorId,
    beta1: f64,
    beta2: f64,
    coupled_beta2: bool,
) -> Result<TensorId> {
    let (batch, _classes) = tape.shape(log_p_k);
    let ones = tape.leaf(vec![1.0; batch], batch, 1)?;

    let masked_k = tape.mul(log_p_k, one_hot)?;
    let ty_k = tape.sum_rows(masked_k)?; // log p_y^k
    let masked_q = tape.mul(log_p_q, one_hot)?;
    let ty_q = tape.sum_rows(masked_q)?;
    let py_k = tape.exp(ty_k)?;
    let py_q = tape.exp(ty_q)?;

    let om_k_raw = tape.sub(ones, py_k)?;
    let om_q_raw = tape.sub(ones, py_q)?;
    let om_k = tape.clamp_min(om_k_raw, PROB_FLOOR)?;
    let om_q = tape.clamp_min(om_q_raw, PROB_FLOOR)?;
    let log_om_k = tape.log(om_k)?;
    let log_om_q = tape.log(om_q)?;
    let d_log_om = tape.sub(log_om_k, log_om_q)?;

    // Binary target-vs-rest KL.
    let d_ty = tape.sub(ty_k, ty_q)?;
    let target_part = tape.mul(py_k, d_ty)?;
    let rest_part = tape.mul(om_k_raw, d_log_om)?;
    let kl_binary = tape.add(target_part, rest_part)?;

    // Non-target conditional KL via
    // Σ_{j≠y} p_j^k (log p_j^k − log p_j^q) / (1 − p_y^k) − Δlog(1 − p_y).
    let p_k = tape.exp(log_p_k)?;
    let p_k_nt = tape.mul(p_k, nt_mask)?;
    let d_log = tape.sub(log_p_k, log_p_q)?;
    let weighted = tape.mul(p_k_nt, d_log)?;
    let s_nt = tape.sum_rows(weighted)?;
    let s_scaled = tape.div(s_nt, om_k)?;
    let kl_rest = tape.sub(s_scaled, d_log_om)?;

    let binary_term = tape.scale(kl_binary, beta1)?;
    let rest_term = if coupled_beta2 {
        tape.mul(om_k_raw, kl_rest)?
    } else {
        tape.scale(kl_rest, beta2)?
    };
    Ok(tape.add(binary_term, rest_term)?)
}

/// Total inter-expert distillation loss: the disentangled divergence summed
/// over every ordered expert pair and, when hard sets are present, over both
/// the global and the hard-restricted assignments, as a batch mean. Returns
/// a `[1×1]` zero for a single expert.
pub fn inter_expert_loss(
    tape: &mut Tape,
    experts: &[SupervisedBatch],
    labels: &[usize],
    cfg: &DistillConfig,
) -> Result<TensorId> {
    let k_count = experts.len();
    if k_count < 2 {
        return Ok(tape.leaf(vec![0.0], 1, 1)?);
    }
    let (batch, classes) = tape.shape(experts[0].log_probs);
    if labels.len() != batch {
        return Err(EnsembleError::CountMismatch {
            what: "labels",
            expected: batch,
            got: labels.len(),
        });
    }

    let (beta1, beta2, coupled) = match cfg.mode {
        DistillMode::Disentangled => (cfg.beta1, cfg.beta2, false),
        DistillMode::ClassicKl => (1.0, 0.0, true),
        DistillMode::TargetOnly => (cfg.beta1, 0.0, false),
        DistillMode::NonTargetOnly => (0.0, cfg.beta2, false),
    };

    let mut one_hot = vec![0.0; batch * classes];
    for (i, &y) in labels.iter().enumerate() {
        one_hot[i * classes + y] = 1.0;
    }
    let one_hot_t = tape.leaf(one_hot.clone(), batch, classes)?;
    let mut global_nt = vec![1.0; batch * classes];
    for (i, &y) in labels.iter().enumerate() {
        global_nt[i * classes + y] = 0.0;
    }
    let global_nt_t = tape.leaf(global_nt, batch, classes)?;

    let with_hard = experts.iter().all(|e| e.hard.is_some());
    let mut terms: Vec<TensorId> = Vec::new();
    for k in 0..k_count {
        for q in 0..k_count {
            if q == k {
                continue;
            }
            let log_p_q = if cfg.detach_teacher {
                tape.detach(experts[q].log_probs)?
            } else {
                experts[q].log_probs
            };
            terms.push(dkl_pair(
                tape,
                experts[k].log_probs,
                log_p_q,
                one_hot_t,
                global_nt_t,
                beta1,
                beta2,
                coupled,
            )?);

            if with_hard {
                let hard_k = experts[k].hard.as_ref().expect("checked");
                let hard_q = experts[q].hard.as_ref().expect("checked");
                // Support for this ordered pair, as an additive mask.
                let support: Vec<f64> = match cfg.hard_support {
                    HardSupportMode::FirstArgument => hard_k.support_mask.clone(),
                    HardSupportMode::Intersection => hard_k
                        .support_mask
                        .iter()
                        .zip(&hard_q.support_mask)
                        .map(|(&a, &b)| a + b)
                        .collect(),
                };
                let renorm =
                    |tape: &mut Tape, shifted: TensorId, support: &[f64]| -> Result<TensorId> {
                        let mask_t = tape.leaf(support.to_vec(), batch, classes)?;
                        let masked = tape.add(shifted, mask_t)?;
                        let lse = tape.log_sum_exp_rows(masked)?;
                        Ok(tape.sub_col(masked, lse)?)
                    };
                let log_h_k = match cfg.hard_support {
                    HardSupportMode::FirstArgument => hard_k.log_probs,
                    HardSupportMode::Intersection => renorm(tape, experts[k].shifted, &support)?,
                };
                let shifted_q = if cfg.detach_teacher {
                    tape.detach(experts[q].shifted)?
                } else {
                    experts[q].shifted
                };
                let log_h_q = renorm(tape, shifted_q, &support)?;
                let mut nt = vec![0.0; batch * classes];
                for i in 0..batch {
                    for j in 0..classes {
                        if support[i * classes + j] == 0.0 && j != labels[i] {
                            nt[i * classes + j] = 1.0;
                        }
                    }
                }
                let nt_t = tape.leaf(nt, batch, classes)?;
                terms.push(dkl_pair(
                    tape, log_h_k, log_h_q, one_hot_t, nt_t, beta1, beta2, coupled,
                )?);
            }
        }
    }

    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    let total = tape.sum_all(acc)?;
    Ok(tape.scale(total, 1.0 / batch as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{supervised_loss_batch, ClassPrior};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_distribution(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    #[test]
    fn kl_decomposition_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let m = rng.gen_range(2..9);
            let p = random_distribution(&mut rng, m);
            let q = random_distribution(&mut rng, m);
            let y = rng.gen_range(0..m);
            let (lhs, rhs) = kl_decomposition_check(&p, &q, y).unwrap();
            assert!(close(lhs, rhs, 1e-12), "|{lhs} - {rhs}|");
        }
    }

    #[test]
    fn kl_decomposition_trivial_cases() {
        let p = [0.2, 0.5, 0.3];
        let (lhs, rhs) = kl_decomposition_check(&p, &p, 1).unwrap();
        assert!(close(lhs, 0.0, 1e-15) && close(rhs, 0.0, 1e-15));

        // Binary case: the non-target part is a point mass with zero KL.
        let p = [0.7, 0.3];
        let q = [0.4, 0.6];
        let (lhs, rhs) = kl_decomposition_check(&p, &q, 0).unwrap();
        let binary = 0.7 * (0.7f64 / 0.4).ln() + 0.3 * (0.3f64 / 0.6).ln();
        assert!(close(lhs, binary, 1e-12) && close(rhs, binary, 1e-12));

        assert!(kl_decomposition_check(&[1.0, 0.0], &[0.5, 0.5], 0).is_err());
    }

    #[test]
    fn dkl_reference_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = random_distribution(&mut rng, 5);
        let q = random_distribution(&mut rng, 5);
        assert!(close(dkl_value(&p, &q, 2, 0.0, 0.0).unwrap(), 0.0, 1e-15));
        assert!(close(dkl_value(&p, &p, 2, 1.3, 0.7).unwrap(), 0.0, 1e-13));

        // beta1 = 1, beta2 = 1 - p_y recovers the plain KL.
        let (kl, _) = kl_decomposition_check(&p, &q, 2).unwrap();
        let d = dkl_value(&p, &q, 2, 1.0, 1.0 - p[2]).unwrap();
        assert!(close(kl, d, 1e-12));
    }

    #[test]
    fn dkl_is_nonnegative_and_vanishes_only_together() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..300 {
            let m = rng.gen_range(2..8);
            let p = random_distribution(&mut rng, m);
            let q = random_distribution(&mut rng, m);
            let y = rng.gen_range(0..m);
            let (b1, b2) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0));
            let d = dkl_value(&p, &q, y, b1, b2).unwrap();
            assert!(d >= -1e-13, "DKL {d} with b1={b1} b2={b2}");
            // Each component is a KL divergence: zero only for matching
            // arguments, hence the whole sum vanishes only when both do.
            let binary = dkl_value(&p, &q, y, 1.0, 0.0).unwrap();
            let rest = dkl_value(&p, &q, y, 0.0, 1.0).unwrap();
            assert!(binary >= -1e-13 && rest >= -1e-13);
            if d.abs() < 1e-13 && b1 > 0.0 && b2 > 0.0 {
                assert!(binary.abs() < 1e-10 && rest.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gating_basics() {
        let mut tape = Tape::new();
        let cfg = FusionConfig::default();

        // Single expert gets weight 1.
        let o = tape
            .leaf(vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.4], 2, 3)
            .unwrap();
        let p = tape.leaf(vec![0.5, 0.5, 0.1], 1, 3).unwrap();
        let w = gating_weights(&mut tape, &[o], &[p], &cfg).unwrap();
        assert_eq!(tape.values(w), &[1.0, 1.0]);

        // Equal similarities give uniform weights; rows always sum to 1.
        let sims = tape.leaf(vec![0.4; 6], 2, 3).unwrap();
        let w = gating_from_similarities(&mut tape, sims, 0.1).unwrap();
        for &v in tape.values(w) {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }

        // Similarity offsets shared by all experts cancel.
        let a = tape.leaf(vec![0.9, 0.1, -0.3], 1, 3).unwrap();
        let b = tape
            .leaf(vec![0.9 + 0.7, 0.1 + 0.7, -0.3 + 0.7], 1, 3)
            .unwrap();
        let wa = gating_from_similarities(&mut tape, a, 0.25).unwrap();
        let wb = gating_from_similarities(&mut tape, b, 0.25).unwrap();
        for (x, y) in tape.values(wa).to_vec().iter().zip(tape.values(wb)) {
            assert!(close(*x, *y, 1e-12));
        }
        assert!(close(tape.values(wa).iter().sum::<f64>(), 1.0, 1e-12));

        // Low temperature saturates toward the best-matching expert.
        let sims = tape.leaf(vec![1.0, 0.0, 0.0], 1, 3).unwrap();
        let w = gating_from_similarities(&mut tape, sims, 0.01).unwrap();
        assert!(tape.values(w)[0] > 1.0 - 1e-10);

        assert!(gating_from_similarities(&mut tape, sims, 0.0).is_err());
    }

    #[test]
    fn fusion_examples() {
        let mut tape = Tape::new();
        // K = 1: the fusion loss is the mean of S + eta C.
        let w = uniform_gating(&mut tape, 2, 1).unwrap();
        let s = tape.leaf(vec![1.0, 3.0], 2, 1).unwrap();
        let c = tape.leaf(vec![0.5, 0.5], 2, 1).unwrap();
        let parts = fusion_loss(&mut tape, w, &[s], Some(&[c]), 2.0).unwrap();
        assert!(close(
            tape.scalar_value(parts.fusion).unwrap(),
            2.0 + 2.0 * 0.5,
            1e-12
        ));

        // Uniform weights over two experts, zero contrastive losses.
        let w = uniform_gating(&mut tape, 1, 2).unwrap();
        let s1 = tape.leaf(vec![1.0], 1, 1).unwrap();
        let s2 = tape.leaf(vec![3.0], 1, 1).unwrap();
        let parts = fusion_loss(&mut tape, w, &[s1, s2], None, 1.0).unwrap();
        assert!(close(tape.scalar_value(parts.fusion).unwrap(), 2.0, 1e-12));
    }

    #[test]
    fn eta_zero_blocks_contrastive_gradient() {
        let mut tape = Tape::new();
        let w = uniform_gating(&mut tape, 2, 1).unwrap();
        let s = tape.leaf(vec![1.0, 2.0], 2, 1).unwrap();
        let c = tape.leaf(vec![0.7, -0.1], 2, 1).unwrap();
        let parts = fusion_loss(&mut tape, w, &[s], Some(&[c]), 0.0).unwrap();
        tape.backward(parts.fusion).unwrap();
        assert!(tape.grad(c).unwrap().iter().all(|&g| g == 0.0));
        assert!(tape.grad(s).unwrap().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn total_loss_weighting() {
        let mut tape = Tape::new();
        let fusion = tape.leaf(vec![2.0], 1, 1).unwrap();
        let inter = tape.leaf(vec![0.5], 1, 1).unwrap();
        let total = total_loss(&mut tape, fusion, inter, 0.0).unwrap();
        assert!(close(tape.scalar_value(total).unwrap(), 2.0, 1e-15));
        let total = total_loss(&mut tape, fusion, inter, 0.6).unwrap();
        assert!(close(tape.scalar_value(total).unwrap(), 2.3, 1e-15));
    }

    #[test]
    fn fused_inference_examples() {
        let p = fused_inference(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert!(close(p[0], 0.5, 1e-12) && close(p[1], 0.5, 1e-12));

        // Identical expert rows reduce to the softmax of any one row.
        let row = vec![0.7, -0.2, 1.4];
        let p = fused_inference(&[row.clone(), row.clone(), row.clone()]).unwrap();
        let lse = log_sum_exp(&row);
        for (j, &o) in row.iter().enumerate() {
            assert!(close(p[j], (o - lse).exp(), 1e-12));
        }

        // A shared logit offset never moves the argmax.
        let a = fused_inference(&[vec![0.4, 0.9, -0.3]]).unwrap();
        let b = fused_inference(&[vec![5.4, 5.9, 4.7]]).unwrap();
        assert_eq!(predict(&a), predict(&b));
    }

    fn supervised_batches(
        tape: &mut Tape,
        logits: &[Vec<f64>],
        labels: &[usize],
        prior: &ClassPrior,
        m_hard: Option<usize>,
    ) -> Vec<SupervisedBatch> {
        logits
            .iter()
            .map(|o| {
                let id = tape.leaf(o.clone(), labels.len(), prior.classes()).unwrap();
                supervised_loss_batch(tape, id, labels, prior, m_hard).unwrap()
            })
            .collect()
    }

    #[test]
    fn inter_expert_loss_basics() {
        let prior = ClassPrior::from_counts(vec![4, 2, 1]).unwrap();
        let labels = [0usize, 2];
        let logits_a = vec![0.4, -0.1, 0.9, 1.2, 0.3, -0.5];
        let logits_b = vec![-0.6, 0.8, 0.2, 0.1, -0.9, 1.5];

        // Identical experts distill to zero.
        let mut tape = Tape::new();
        let batches = supervised_batches(
            &mut tape,
            &[logits_a.clone(), logits_a.clone()],
            &labels,
            &prior,
            Some(1),
        );
        let loss =
            inter_expert_loss(&mut tape, &batches, &labels, &DistillConfig::default()).unwrap();
        assert!(tape.scalar_value(loss).unwrap().abs() < 1e-10);

        // Swapping expert order leaves the ordered-pair sum unchanged.
        let run = |a: &Vec<f64>, b: &Vec<f64>| -> f64 {
            let mut tape = Tape::new();
            let batches =
                supervised_batches(&mut tape, &[a.clone(), b.clone()], &labels, &prior, Some(1));
            let loss =
                inter_expert_loss(&mut tape, &batches, &labels, &DistillConfig::default()).unwrap();
            tape.scalar_value(loss).unwrap()
        };
        assert!(close(
            run(&logits_a, &logits_b),
            run(&logits_b, &logits_a),
            1e-12
        ));

        // K = 1 contributes nothing.
        let mut tape = Tape::new();
        let batches = supervised_batches(
            &mut tape,
            std::slice::from_ref(&logits_a),
            &labels,
            &prior,
            Some(1),
        );
        let loss =
            inter_expert_loss(&mut tape, &batches, &labels, &DistillConfig::default()).unwrap();
        assert_eq!(tape.scalar_value(loss).unwrap(), 0.0);
    }

    #[test]
    fn binary_hand_case_two_ordered_pairs() {
        // Two experts, two classes, one sample: p1 = (0.9, 0.1),
        // p2 = (0.6, 0.4), y = 0, beta1 = 1, beta2 = 0, no hard term. Each
        // ordered pair contributes its binary KL.
        let prior = ClassPrior::uniform(2);
        let labels = [0usize];
        // softmax([ln p, ln(1-p)]) reproduces (p, 1-p) exactly.
        let logits_1 = vec![0.9f64.ln(), 0.1f64.ln()];
        let logits_2 = vec![0.6f64.ln(), 0.4f64.ln()];
        let mut tape = Tape::new();
        let batches = supervised_batches(&mut tape, &[logits_1, logits_2], &labels, &prior, None);
        let cfg = DistillConfig {
            beta1: 1.0,
            beta2: 0.0,
            ..DistillConfig::default()
        };
        let loss = inter_expert_loss(&mut tape, &batches, &labels, &cfg).unwrap();

        // Ordered pairs: the asymmetric KL runs both ways.
        let kl12 = 0.9 * (0.9f64 / 0.6).ln() + 0.1 * (0.1f64 / 0.4).ln();
        let kl21 = 0.6 * (0.6f64 / 0.9).ln() + 0.4 * (0.4f64 / 0.1).ln();
        assert!(close(kl12, 0.226289, 1e-6));
        assert!(close(tape.scalar_value(loss).unwrap(), kl12 + kl21, 1e-12));
    }

    #[test]
    fn classic_mode_equals_plain_kl_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (batch, classes) = (4, 5);
        let prior = ClassPrior::from_counts(vec![16, 8, 4, 2, 1]).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let logits: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                (0..batch * classes)
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect()
            })
            .collect();

        let mut tape = Tape::new();
        let batches = supervised_batches(&mut tape, &logits, &labels, &prior, None);
        let cfg = DistillConfig {
            mode: DistillMode::ClassicKl,
            ..DistillConfig::default()
        };
        let loss = inter_expert_loss(&mut tape, &batches, &labels, &cfg).unwrap();

        // Independent plain-KL oracle over the balanced probabilities.
        let mut expected = 0.0;
        for k in 0..3 {
            for q in 0..3 {
                if k == q {
                    continue;
                }
                for i in 0..batch {
                    let p = crate::losses::balanced_probability(
                        &logits[k][i * classes..(i + 1) * classes],
                        &prior,
                    )
                    .unwrap();
                    let qd = crate::losses::balanced_probability(
                        &logits[q][i * classes..(i + 1) * classes],
                        &prior,
                    )
                    .unwrap();
                    expected += p
                        .iter()
                        .zip(&qd)
                        .map(|(&pj, &qj)| pj * (pj / qj).ln())
                        .sum::<f64>();
                }
            }
        }
        expected /= batch as f64;
        assert!(
            close(tape.scalar_value(loss).unwrap(), expected, 1e-10),
            "{} vs {}",
            tape.scalar_value(loss).unwrap(),
            expected
        );
    }

    #[test]
    fn detach_teacher_stops_gradients_into_the_second_argument() {
        let prior = ClassPrior::uniform(3);
        let labels = [1usize];
        let run = |detach: bool| -> (f64, f64) {
            let mut tape = Tape::new();
            let o1 = tape.leaf(vec![0.2, 0.9, -0.3], 1, 3).unwrap();
            let o2 = tape.leaf(vec![-0.5, 0.1, 0.7], 1, 3).unwrap();
            let b1 = supervised_loss_batch(&mut tape, o1, &labels, &prior, None).unwrap();
            let b2 = supervised_loss_batch(&mut tape, o2, &labels, &prior, None).unwrap();
            let cfg = DistillConfig {
                detach_teacher: detach,
                ..DistillConfig::default()
            };
            let loss = inter_expert_loss(&mut tape, &[b1, b2], &labels, &cfg).unwrap();
            tape.backward(loss).unwrap();
            let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>();
            (norm(tape.grad(o1).unwrap()), norm(tape.grad(o2).unwrap()))
        };
        let (g1, g2) = run(false);
        assert!(g1 > 0.0 && g2 > 0.0);
        // With detachment each expert still learns as the first argument of
        // its own pairs, but the teacher side contributes no gradient; the
        // flows change measurably.
        let (d1, d2) = run(true);
        assert!(d1 > 0.0 && d2 > 0.0);
        assert!((g1 - d1).abs() > 1e-12 || (g2 - d2).abs() > 1e-12);
    }

    #[test]
    fn inter_loss_gradients_match_finite_differences() {
        use crate::tensor::gradcheck;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (batch, classes) = (3, 4);
        let prior = ClassPrior::from_counts(vec![9, 5, 2, 1]).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let o1: Vec<f64> = (0..batch * classes)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let o2: Vec<f64> = (0..batch * classes)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();

        let labels2 = labels.clone();
        let prior2 = prior.clone();
        let mut build =
            move |t: &mut Tape, ids: &[TensorId]| -> std::result::Result<TensorId, TensorError> {
                let wrap = |e: EnsembleError| TensorError::Invalid {
                    op: "inter",
                    msg: e.to_string(),
                };
                let b1 = supervised_loss_batch(t, ids[0], &labels2, &prior2, Some(2))
                    .map_err(|e| wrap(EnsembleError::Loss(e)))?;
                let b2 = supervised_loss_batch(t, ids[1], &labels2, &prior2, Some(2))
                    .map_err(|e| wrap(EnsembleError::Loss(e)))?;
                let cfg = DistillConfig {
                    beta1: 0.8,
                    beta2: 1.4,
                    ..DistillConfig::default()
                };
                inter_expert_loss(t, &[b1, b2], &labels2, &cfg).map_err(wrap)
            };
        let inputs = [(o1, (batch, classes)), (o2, (batch, classes))];
        let out = gradcheck::check_gradients(&mut build, &inputs, gradcheck::DEFAULT_EPS).unwrap();
        assert!(
            out.passes(gradcheck::DEFAULT_TOL),
            "inter gradient error {:.3e}",
            out.max_err
        );
    }
}
