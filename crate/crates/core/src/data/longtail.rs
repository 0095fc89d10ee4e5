//! Power-law resampling of a training set and balanced held-out splits.
//!
//! `make_long_tailed` keeps `N_j = max(round(N_1 · j^(−s)), 1)` samples of
//! the class with the j-th largest size, where `s = log(IF) / log(M)`. This
//! pins the ratio of the largest to the smallest retained class to the
//! target imbalance factor up to rounding, because `M^(−s) = 1/IF` exactly.
//! Sampling is uniform without replacement and never duplicates a graph.

use super::{DataError, DatasetStats, Graph, Result};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parameters of the power-law resampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongTailSpec {
    /// Target `N_1 / N_M`, at least 1.
    pub target_if: f64,
    /// Retained size of the largest class; defaults to everything available.
    pub head_size: Option<usize>,
    pub seed: u64,
}

impl LongTailSpec {
    pub fn new(target_if: f64, seed: u64) -> Self {
        Self {
            target_if,
            head_size: None,
            seed,
        }
    }

    /// `s = log(IF) / log(M)`.
    pub fn decay_exponent(&self, class_count: usize) -> f64 {
        self.target_if.ln() / (class_count as f64).ln()
    }
}

/// Per-rank target sizes `max(round(N_1 · j^(−s)), 1)` for `j = 1..=M`.
pub fn zipf_sizes(head_size: usize, class_count: usize, target_if: f64) -> Vec<usize> {
    let s = target_if.ln() / (class_count as f64).ln();
    (1..=class_count)
        .map(|j| {
            let raw = head_size as f64 * (j as f64).powf(-s);
            (raw.round() as usize).max(1)
        })
        .collect()
}

/// Subsample `graphs` so the class sizes follow the spec's power law.
/// Classes are ranked by available size, ties broken by ascending label.
pub fn make_long_tailed(
    graphs: &[Graph],
    spec: &LongTailSpec,
) -> Result<(Vec<Graph>, DatasetStats)> {
    if spec.target_if < 1.0 {
        return Err(DataError::InvalidSpec(format!(
            "imbalance factor must be >= 1, got {}",
            spec.target_if
        )));
    }
    let stats = DatasetStats::from_graphs(graphs)?;
    let class_count = stats.class_count;
    if class_count < 2 {
        return Err(DataError::InvalidSpec(
            "long-tailing needs at least 2 classes".into(),
        ));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, g) in graphs.iter().enumerate() {
        by_class[g.label].push(i);
    }
    let mut ranked: Vec<usize> = (0..class_count).collect();
    ranked.sort_by_key(|&c| (std::cmp::Reverse(by_class[c].len()), c));

    let head_available = by_class[ranked[0]].len();
    let head_size = spec.head_size.unwrap_or(head_available);
    if head_size > head_available {
        return Err(DataError::ClassTooSmall {
            class: ranked[0],
            needed: head_size,
            available: head_available,
        });
    }
    let targets = zipf_sizes(head_size, class_count, spec.target_if);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut selected = Vec::new();
    for (rank, &class) in ranked.iter().enumerate() {
        let target = targets[rank];
        let available = by_class[class].len();
        if target > available {
            return Err(DataError::ClassTooSmall {
                class,
                needed: target,
                available,
            });
        }
        let mut pool = by_class[class].clone();
        pool.shuffle(&mut rng);
        pool.truncate(target);
        pool.sort_unstable();
        selected.extend(pool);
    }

    let train: Vec<Graph> = selected.iter().map(|&i| graphs[i].clone()).collect();
    let stats = DatasetStats::from_graphs(&train)?;
    debug_assert!(stats.is_monotone());
    Ok((train, stats))
}

/// Carve balanced validation and test sets, leaving the rest untouched.
/// Deterministic under `seed`; classes are processed in ascending label
/// order.
pub fn split_balanced(
    graphs: &[Graph],
    per_class_val: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<(Vec<Graph>, Vec<Graph>, Vec<Graph>)> {
    let stats = DatasetStats::from_graphs(graphs)?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); stats.class_count];
    for (i, g) in graphs.iter().enumerate() {
        by_class[g.label].push(i);
    }
    let needed = per_class_val + per_class_test + 1;
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < needed {
            return Err(DataError::ClassTooSmall {
                class,
                needed,
                available: members.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut val, mut test, mut rest) = (Vec::new(), Vec::new(), Vec::new());
    for members in &by_class {
        let mut pool = members.clone();
        pool.shuffle(&mut rng);
        val.extend_from_slice(&pool[..per_class_val]);
        test.extend_from_slice(&pool[per_class_val..per_class_val + per_class_test]);
        rest.extend_from_slice(&pool[per_class_val + per_class_test..]);
    }
    val.sort_unstable();
    test.sort_unstable();
    rest.sort_unstable();
    let pick = |ids: &[usize]| ids.iter().map(|&i| graphs[i].clone()).collect::<Vec<_>>();
    Ok((pick(&val), pick(&test), pick(&rest)))
}
