//! Graph data model, dataset statistics, and corpus serialization.
//!
//! Graphs are undirected, unweighted, with dense node attributes and one
//! integer class label. The native on-disk corpus format is JSON lines, one
//! object per graph with keys `n` (node count), `edges` (pairs of 0-based
//! node indices), `x` (per-node attribute rows) and `y` (class label).

pub mod longtail;
pub mod motif;
pub mod tu;

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{file}:{line}: {msg}")]
    Malformed {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("class {class}: needs {needed} samples, only {available} available")]
    ClassTooSmall {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("invalid parameters: {0}")]
    InvalidSpec(String),
}

type Result<T> = std::result::Result<T, DataError>;

/// One undirected attributed graph with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub node_count: usize,
    /// Canonical edge list: `u < v`, deduplicated, no self loops.
    pub edges: Vec<(usize, usize)>,
    /// Row-major `[node_count × attr_dim]`.
    pub node_attrs: Vec<f64>,
    pub attr_dim: usize,
    pub label: usize,
}

impl Graph {
    pub fn new(
        node_count: usize,
        mut edges: Vec<(usize, usize)>,
        node_attrs: Vec<f64>,
        attr_dim: usize,
        label: usize,
    ) -> Result<Self> {
        if node_count == 0 {
            return Err(DataError::InvalidGraph("graph has no nodes".into()));
        }
        if node_attrs.len() != node_count * attr_dim {
            return Err(DataError::InvalidGraph(format!(
                "{} attribute values for {} nodes of width {}",
                node_attrs.len(),
                node_count,
                attr_dim
            )));
        }
        for e in &mut edges {
            if e.0 == e.1 {
                return Err(DataError::InvalidGraph(format!(
                    "self loop at node {}",
                    e.0
                )));
            }
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
            if e.1 >= node_count {
                return Err(DataError::InvalidGraph(format!(
                    "edge ({}, {}) out of range for {} nodes",
                    e.0, e.1, node_count
                )));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self {
            node_count,
            edges,
            node_attrs,
            attr_dim,
            label,
        })
    }

    pub fn attr_row(&self, node: usize) -> &[f64] {
        &self.node_attrs[node * self.attr_dim..(node + 1) * self.attr_dim]
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.node_count];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Neighbor lists from the canonical edge set.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// All unordered node pairs that are not edges.
    pub fn non_edges(&self) -> Vec<(usize, usize)> {
        let present: BTreeSet<(usize, usize)> = self.edges.iter().copied().collect();
        let mut out = Vec::new();
        for u in 0..self.node_count {
            for v in u + 1..self.node_count {
                if !present.contains(&(u, v)) {
                    out.push((u, v));
                }
            }
        }
        out
    }
}

/// One-hot degree features for graphs that ship without node attributes.
/// Degrees above `max_degree` share the last slot.
pub fn degree_one_hot(
    node_count: usize,
    edges: &[(usize, usize)],
    max_degree: usize,
) -> (Vec<f64>, usize) {
    let dim = max_degree + 1;
    let mut deg = vec![0usize; node_count];
    for &(u, v) in edges {
        deg[u] += 1;
        deg[v] += 1;
    }
    let mut attrs = vec![0.0; node_count * dim];
    for (node, &d) in deg.iter().enumerate() {
        attrs[node * dim + d.min(max_degree)] = 1.0;
    }
    (attrs, dim)
}

/// Class-size profile of a graph list. `class_sizes` is ordered by
/// descending size, not by class id; `counts_by_class` keeps the id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub class_count: usize,
    /// `N_1 ≥ N_2 ≥ … ≥ N_M`.
    pub class_sizes: Vec<usize>,
    pub counts_by_class: Vec<usize>,
    pub total: usize,
    /// `N_1 / N_M`.
    pub imbalance_factor: f64,
}

impl DatasetStats {
    pub fn from_graphs(graphs: &[Graph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(DataError::InvalidSpec("empty graph list".into()));
        }
        let class_count = graphs.iter().map(|g| g.label).max().unwrap() + 1;
        let mut counts = vec![0usize; class_count];
        for g in graphs {
            counts[g.label] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(DataError::InvalidSpec(format!(
                "class {empty} has no samples; labels must be dense"
            )));
        }
        let mut sizes = counts.clone();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        let total = graphs.len();
        let imbalance_factor = sizes[0] as f64 / *sizes.last().unwrap() as f64;
        Ok(Self {
            class_count,
            class_sizes: sizes,
            counts_by_class: counts,
            total,
            imbalance_factor,
        })
    }

    /// Every earlier rank holds at least as many samples as every later one.
    pub fn is_monotone(&self) -> bool {
        self.class_sizes.windows(2).all(|w| w[0] >= w[1])
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDto {
    n: usize,
    edges: Vec<(usize, usize)>,
    x: Vec<Vec<f64>>,
    y: usize,
}

impl From<&Graph> for GraphDto {
    fn from(g: &Graph) -> Self {
        GraphDto {
            n: g.node_count,
            edges: g.edges.clone(),
            x: (0..g.node_count).map(|i| g.attr_row(i).to_vec()).collect(),
            y: g.label,
        }
    }
}

impl TryFrom<GraphDto> for Graph {
    type Error = DataError;

    fn try_from(dto: GraphDto) -> Result<Self> {
        if dto.x.len() != dto.n {
            return Err(DataError::InvalidGraph(format!(
                "{} attribute rows for {} nodes",
                dto.x.len(),
                dto.n
            )));
        }
        let attr_dim = dto.x.first().map_or(0, |r| r.len());
        if dto.x.iter().any(|r| r.len() != attr_dim) {
            return Err(DataError::InvalidGraph("ragged attribute rows".into()));
        }
        let node_attrs = dto.x.into_iter().flatten().collect();
        Graph::new(dto.n, dto.edges, node_attrs, attr_dim, dto.y)
    }
}

/// Write a corpus as JSON lines.
pub fn write_jsonl(path: impl AsRef<Path>, graphs: &[Graph]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for g in graphs {
        serde_json::to_writer(&mut w, &GraphDto::from(g))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read a corpus from JSON lines.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Graph>> {
    let file = path.as_ref().display().to_string();
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut graphs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let dto: GraphDto = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            file: file.clone(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        graphs.push(Graph::try_from(dto)?);
    }
    Ok(graphs)
}
