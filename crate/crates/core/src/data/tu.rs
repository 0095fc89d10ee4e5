//! Ingestion of the TU text layout for graph classification corpora.
//!
//! A dataset directory holds `DS_A.txt` (comma-separated 1-based edge
//! pairs), `DS_graph_indicator.txt` (1-based graph id per node line),
//! `DS_graph_labels.txt` (one label per graph) and optionally
//! `DS_node_attributes.txt` (comma-separated reals per node line). Field
//! separators are a comma plus optional spaces.
//!
//! Ingestion normalizes the corpus: reversed duplicate edges collapse to one
//! undirected edge, self loops are dropped, labels are remapped to dense
//! 0-based ids ordered by descending class size (ties by ascending original
//! label), and missing node attributes are replaced by one-hot degree
//! features capped at a configurable maximum degree.

use super::{degree_one_hot, DataError, DatasetStats, Graph, Result};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

fn malformed(file: &Path, line: usize, msg: impl Into<String>) -> DataError {
    DataError::Malformed {
        file: file.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

fn parse_pair(file: &Path, line_no: usize, line: &str) -> Result<(usize, usize)> {
    let mut parts = line.split(',');
    let mut next = |what: &str| -> Result<usize> {
        let field = parts
            .next()
            .ok_or_else(|| malformed(file, line_no, format!("missing {what}")))?;
        field
            .trim()
            .parse::<usize>()
            .map_err(|e| malformed(file, line_no, format!("{what}: {e}")))
    };
    let u = next("first node id")?;
    let v = next("second node id")?;
    if parts.next().is_some() {
        return Err(malformed(file, line_no, "more than two fields"));
    }
    Ok((u, v))
}

/// Ingest a TU-format directory. Returns the graphs with remapped labels and
/// the resulting class-size profile.
pub fn ingest_tu(
    dir: impl AsRef<Path>,
    max_degree_one_hot: usize,
) -> Result<(Vec<Graph>, DatasetStats)> {
    let dir = dir.as_ref();
    let prefix = find_prefix(dir)?;
    let path = |suffix: &str| -> PathBuf { dir.join(format!("{prefix}_{suffix}.txt")) };

    let indicator_path = path("graph_indicator");
    let labels_path = path("graph_labels");
    let edges_path = path("A");
    let attrs_path = path("node_attributes");

    let indicator_lines = read_lines(&indicator_path)?;
    let node_count = indicator_lines.len();
    if node_count == 0 {
        return Err(malformed(&indicator_path, 1, "no nodes"));
    }
    let mut graph_of = Vec::with_capacity(node_count);
    for (i, line) in indicator_lines.iter().enumerate() {
        let gid: usize = line
            .trim()
            .parse()
            .map_err(|e| malformed(&indicator_path, i + 1, format!("graph id: {e}")))?;
        if gid == 0 {
            return Err(malformed(&indicator_path, i + 1, "graph ids are 1-based"));
        }
        graph_of.push(gid - 1);
    }
    let graph_count = graph_of.iter().max().unwrap() + 1;

    let label_lines = read_lines(&labels_path)?;
    if label_lines.len() != graph_count {
        return Err(malformed(
            &labels_path,
            label_lines.len().min(graph_count) + 1,
            format!("{} labels for {} graphs", label_lines.len(), graph_count),
        ));
    }
    let mut raw_labels = Vec::with_capacity(graph_count);
    for (i, line) in label_lines.iter().enumerate() {
        let label: i64 = line
            .trim()
            .parse()
            .map_err(|e| malformed(&labels_path, i + 1, format!("label: {e}")))?;
        raw_labels.push(label);
    }

    // Local node numbering: nodes of one graph in ascending global order.
    let mut local_index = vec![0usize; node_count];
    let mut nodes_per_graph = vec![0usize; graph_count];
    for (global, &gid) in graph_of.iter().enumerate() {
        local_index[global] = nodes_per_graph[gid];
        nodes_per_graph[gid] += 1;
    }
    if let Some(gid) = nodes_per_graph.iter().position(|&n| n == 0) {
        return Err(malformed(
            &indicator_path,
            node_count,
            format!("graph {} has no nodes", gid + 1),
        ));
    }

    let mut edge_sets: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); graph_count];
    for (i, line) in read_lines(&edges_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (u, v) = parse_pair(&edges_path, i + 1, line)?;
        for node in [u, v] {
            if node == 0 || node > node_count {
                return Err(malformed(
                    &edges_path,
                    i + 1,
                    format!("node {node} out of range (corpus has {node_count} nodes)"),
                ));
            }
        }
        let (gu, gv) = (graph_of[u - 1], graph_of[v - 1]);
        if gu != gv {
            return Err(malformed(
                &edges_path,
                i + 1,
                format!("edge ({u}, {v}) crosses graphs {} and {}", gu + 1, gv + 1),
            ));
        }
        if u == v {
            continue; // self loops are dropped
        }
        let (lu, lv) = (local_index[u - 1], local_index[v - 1]);
        edge_sets[gu].insert((lu.min(lv), lu.max(lv)));
    }

    let attrs = if attrs_path.exists() {
        let lines = read_lines(&attrs_path)?;
        if lines.len() != node_count {
            return Err(malformed(
                &attrs_path,
                lines.len().min(node_count) + 1,
                format!("{} attribute lines for {} nodes", lines.len(), node_count),
            ));
        }
        let mut rows = Vec::with_capacity(node_count);
        let mut width = None;
        for (i, line) in lines.iter().enumerate() {
            let row: Vec<f64> = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| malformed(&attrs_path, i + 1, format!("attribute: {e}")))
                })
                .collect::<Result<_>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(malformed(
                        &attrs_path,
                        i + 1,
                        format!("{} fields, expected {w}", row.len()),
                    ));
                }
                _ => {}
            }
            rows.push(row);
        }
        Some(rows)
    } else {
        None
    };

    // Dense label remap ordered by descending class size, ties by ascending
    // original label.
    let mut distinct: Vec<i64> = raw_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let mut counts: Vec<(i64, usize)> = distinct
        .iter()
        .map(|&l| (l, raw_labels.iter().filter(|&&x| x == l).count()))
        .collect();
    counts.sort_by_key(|&(label, count)| (std::cmp::Reverse(count), label));
    let remap = |raw: i64| -> usize { counts.iter().position(|&(l, _)| l == raw).unwrap() };

    let mut graphs = Vec::with_capacity(graph_count);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); graph_count];
    for (global, &gid) in graph_of.iter().enumerate() {
        members[gid].push(global);
    }
    for gid in 0..graph_count {
        let n = nodes_per_graph[gid];
        let edges: Vec<(usize, usize)> = edge_sets[gid].iter().copied().collect();
        let (node_attrs, attr_dim) = match &attrs {
            Some(rows) => {
                let width = rows[0].len();
                let mut flat = Vec::with_capacity(n * width);
                for &global in &members[gid] {
                    flat.extend_from_slice(&rows[global]);
                }
                (flat, width)
            }
            None => degree_one_hot(n, &edges, max_degree_one_hot),
        };
        graphs.push(Graph::new(
            n,
            edges,
            node_attrs,
            attr_dim,
            remap(raw_labels[gid]),
        )?);
    }

    let stats = DatasetStats::from_graphs(&graphs)?;
    Ok((graphs, stats))
}

fn find_prefix(dir: &Path) -> Result<String> {
    let mut prefixes = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix("_A.txt") {
            prefixes.push(stem.to_string());
        }
    }
    prefixes.sort();
    match prefixes.len() {
        0 => Err(DataError::InvalidSpec(format!(
            "no *_A.txt file in {}",
            dir.display()
        ))),
        1 => Ok(prefixes.pop().unwrap()),
        _ => Err(DataError::InvalidSpec(format!(
            "multiple TU datasets in {}: {prefixes:?}",
            dir.display()
        ))),
    }
}
