//! Stochastic graph augmentations for contrastive view construction.
//!
//! Four kinds: attribute masking, node dropping, edge perturbation, and
//! random-walk subgraph sampling. Every augmentation preserves the label and
//! yields a structurally valid graph; node dropping and subgraph sampling
//! always keep at least one node. The output is a pure function of the graph
//! and the spec, including its per-sample seed.

use crate::data::{DataError, Graph};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("augmentation ratio must be in [0, 1], got {0}")]
    RatioOutOfRange(f64),
    #[error(transparent)]
    Data(#[from] DataError),
}

type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    AttributeMask,
    NodeDrop,
    EdgePerturb,
    Subgraph,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::AttributeMask,
        AugmentKind::NodeDrop,
        AugmentKind::EdgePerturb,
        AugmentKind::Subgraph,
    ];
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    /// Strength in `[0, 1]`. For subgraph sampling this is the target
    /// fraction of nodes retained.
    pub ratio: f64,
    pub seed: u64,
}

/// What an augmentation actually did; edge additions can fall short of the
/// request when the graph has no room left (a complete graph has no
/// non-edges).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentReport {
    pub entries_masked: usize,
    pub nodes_removed: usize,
    pub edges_deleted: usize,
    pub edges_added: usize,
    pub edges_add_requested: usize,
}

pub fn apply(g: &Graph, spec: &AugmentSpec) -> Result<Graph> {
    apply_detailed(g, spec).map(|(g, _)| g)
}

pub fn apply_detailed(g: &Graph, spec: &AugmentSpec) -> Result<(Graph, AugmentReport)> {
    if !(0.0..=1.0).contains(&spec.ratio) {
        return Err(AugmentError::RatioOutOfRange(spec.ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        AugmentKind::AttributeMask => mask_attributes(g, spec.ratio, &mut rng),
        AugmentKind::NodeDrop => drop_nodes(g, spec.ratio, &mut rng),
        AugmentKind::EdgePerturb => perturb_edges(g, spec.ratio, &mut rng),
        AugmentKind::Subgraph => sample_subgraph(g, spec.ratio, &mut rng),
    }
}

fn mask_attributes(g: &Graph, ratio: f64, rng: &mut ChaCha8Rng) -> Result<(Graph, AugmentReport)> {
    let total = g.node_count * g.attr_dim;
    let k = ((ratio * total as f64).round() as usize).min(total);
    let mut attrs = g.node_attrs.clone();
    let mut slots: Vec<usize> = (0..total).collect();
    slots.shuffle(rng);
    for &slot in slots.iter().take(k) {
        attrs[slot] = 0.0;
    }
    let out = Graph::new(g.node_count, g.edges.clone(), attrs, g.attr_dim, g.label)?;
    Ok((
        out,
        AugmentReport {
            entries_masked: k,
            ..Default::default()
        },
    ))
}

fn drop_nodes(g: &Graph, ratio: f64, rng: &mut ChaCha8Rng) -> Result<(Graph, AugmentReport)> {
    let mut k = (ratio * g.node_count as f64).round() as usize;
    if k >= g.node_count {
        k = g.node_count - 1; // never remove all nodes
    }
    let mut order: Vec<usize> = (0..g.node_count).collect();
    order.shuffle(rng);
    let mut removed = vec![false; g.node_count];
    for &node in order.iter().take(k) {
        removed[node] = true;
    }
    let mut new_index = vec![usize::MAX; g.node_count];
    let mut kept = 0;
    for node in 0..g.node_count {
        if !removed[node] {
            new_index[node] = kept;
            kept += 1;
        }
    }
    let edges: Vec<(usize, usize)> = g
        .edges
        .iter()
        .filter(|&&(u, v)| !removed[u] && !removed[v])
        .map(|&(u, v)| (new_index[u], new_index[v]))
        .collect();
    let mut attrs = Vec::with_capacity(kept * g.attr_dim);
    for node in 0..g.node_count {
        if !removed[node] {
            attrs.extend_from_slice(g.attr_row(node));
        }
    }
    let out = Graph::new(kept, edges, attrs, g.attr_dim, g.label)?;
    Ok((
        out,
        AugmentReport {
            nodes_removed: k,
            ..Default::default()
        },
    ))
}

fn perturb_edges(g: &Graph, ratio: f64, rng: &mut ChaCha8Rng) -> Result<(Graph, AugmentReport)> {
    let k = (ratio * g.edges.len() as f64 / 2.0).round() as usize;
    let k = k.min(g.edges.len());

    let mut edges = g.edges.clone();
    edges.shuffle(rng);
    let deleted = k;
    edges.truncate(g.edges.len() - k);

    // Candidates come from the original graph, so a deleted edge cannot be
    // re-added in the same pass.
    let mut candidates = g.non_edges();
    candidates.shuffle(rng);
    let added = candidates.len().min(k);
    edges.extend(candidates.into_iter().take(added));

    let out = Graph::new(
        g.node_count,
        edges,
        g.node_attrs.clone(),
        g.attr_dim,
        g.label,
    )?;
    Ok((
        out,
        AugmentReport {
            edges_deleted: deleted,
            edges_added: added,
            edges_add_requested: k,
            ..Default::default()
        },
    ))
}

fn sample_subgraph(g: &Graph, ratio: f64, rng: &mut ChaCha8Rng) -> Result<(Graph, AugmentReport)> {
    let target = ((ratio * g.node_count as f64).round() as usize).clamp(1, g.node_count);
    let adj = g.adjacency();
    let start = rng.gen_range(0..g.node_count);
    let mut visited = vec![false; g.node_count];
    visited[start] = true;
    let mut collected = 1;
    let mut current = start;
    // The walk restarts from the start node on dead ends; the step budget
    // terminates walks trapped in a component smaller than the target.
    let budget = 20 * g.node_count * target + 32;
    let mut steps = 0;
    while collected < target && steps < budget {
        steps += 1;
        match adj[current].choose(rng) {
            Some(&next) => {
                if !visited[next] {
                    visited[next] = true;
                    collected += 1;
                }
                current = next;
            }
            None => current = start,
        }
    }

    let mut new_index = vec![usize::MAX; g.node_count];
    let mut kept = 0;
    for node in 0..g.node_count {
        if visited[node] {
            new_index[node] = kept;
            kept += 1;
        }
    }
    let edges: Vec<(usize, usize)> = g
        .edges
        .iter()
        .filter(|&&(u, v)| visited[u] && visited[v])
        .map(|&(u, v)| (new_index[u], new_index[v]))
        .collect();
    let mut attrs = Vec::with_capacity(kept * g.attr_dim);
    for node in 0..g.node_count {
        if visited[node] {
            attrs.extend_from_slice(g.attr_row(node));
        }
    }
    let out = Graph::new(kept, edges, attrs, g.attr_dim, g.label)?;
    Ok((
        out,
        AugmentReport {
            nodes_removed: g.node_count - kept,
            ..Default::default()
        },
    ))
}
