//! Evaluation: fused test-time inference, overall and per-class accuracy,
//! and head/medium/tail group accuracies.
//!
//! Groups are class-size terciles of the *training* split: the
//! `max(1, round(M/3))` most populous classes form the head, the same count
//! from the bottom forms the tail, and whatever is left is the medium group.

use crate::data::Graph;
use crate::ensemble::{fused_inference, predict, EnsembleError};
use crate::expert::{classify, encode_batch, ExpertBank, ExpertError};
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error("{0} train counts for {1} classes")]
    CountWidth(usize, usize),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Top-1 accuracy over the split.
    pub overall: f64,
    /// Per-class accuracy, indexed by class id; `NaN` for classes absent
    /// from the split.
    pub per_class: Vec<f64>,
    pub head: Option<f64>,
    pub medium: Option<f64>,
    pub tail: Option<f64>,
}

/// Class ids per tercile, ranked by training count (ties toward the lower
/// class id, which matches the ingestion ordering).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroups {
    pub head: Vec<usize>,
    pub medium: Vec<usize>,
    pub tail: Vec<usize>,
}

pub fn class_groups(train_counts: &[usize]) -> ClassGroups {
    let classes = train_counts.len();
    let mut ranked: Vec<usize> = (0..classes).collect();
    ranked.sort_by_key(|&c| (std::cmp::Reverse(train_counts[c]), c));
    let head_n = ((classes as f64 / 3.0).round() as usize)
        .max(1)
        .min(classes);
    let tail_n = head_n.min(classes - head_n);
    ClassGroups {
        head: ranked[..head_n].to_vec(),
        medium: ranked[head_n..classes - tail_n].to_vec(),
        tail: ranked[classes - tail_n..].to_vec(),
    }
}

/// Evaluate the bank with averaged-logit fusion over a split.
pub fn evaluate(
    bank: &ExpertBank,
    graphs: &[Graph],
    train_counts: &[usize],
    eval_batch: usize,
) -> Result<Metrics, MetricsError> {
    if graphs.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let classes = bank.dims.classes;
    if train_counts.len() != classes {
        return Err(MetricsError::CountWidth(train_counts.len(), classes));
    }

    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    let chunk = eval_batch.max(1);
    for batch in graphs.chunks(chunk) {
        let refs: Vec<&Graph> = batch.iter().collect();
        // Value-only forward passes; the tape is dropped without backward.
        let mut tape = Tape::new();
        let mut per_expert: Vec<Vec<f64>> = Vec::with_capacity(bank.expert_count());
        for expert in &bank.experts {
            let bound = expert.bind(&mut tape)?;
            let h = encode_batch(&mut tape, &refs, &bound, &bank.dims)?;
            let logits = classify(&mut tape, h, &bound)?;
            per_expert.push(tape.values(logits).to_vec());
        }
        for (i, g) in batch.iter().enumerate() {
            let rows: Vec<Vec<f64>> = per_expert
                .iter()
                .map(|o| o[i * classes..(i + 1) * classes].to_vec())
                .collect();
            let probs = fused_inference(&rows)?;
            let hit = predict(&probs) == g.label;
            total[g.label] += 1;
            if hit {
                correct[g.label] += 1;
            }
        }
    }

    let per_class: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| {
            if t == 0 {
                f64::NAN
            } else {
                c as f64 / t as f64
            }
        })
        .collect();
    let overall = correct.iter().sum::<usize>() as f64 / graphs.len() as f64;

    let groups = class_groups(train_counts);
    let group_acc = |ids: &[usize]| -> Option<f64> {
        let (mut c, mut t) = (0usize, 0usize);
        for &id in ids {
            c += correct[id];
            t += total[id];
        }
        (t > 0).then(|| c as f64 / t as f64)
    };
    Ok(Metrics {
        overall,
        per_class,
        head: group_acc(&groups.head),
        medium: group_acc(&groups.medium),
        tail: group_acc(&groups.tail),
    })
}
