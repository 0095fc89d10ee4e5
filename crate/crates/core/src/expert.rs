//! One expert network and the bank of K experts.
//!
//! An expert owns a mean-aggregating message-passing encoder, a projection
//! head for the contrastive space, a classifier head, one trainable anchor
//! per class, and a gating prototype. Experts hold their parameters as plain
//! arrays; each training step binds them onto a fresh tape.
//!
//! Encoder layer: `h_v ← ReLU(W_self · h_v + W_neigh · mean_{u∈N(v)} h_u)`,
//! with a zero neighbor term for isolated nodes. The graph embedding is the
//! mean over node embeddings. Classification consumes the embedding of the
//! original graph; the contrastive terms consume the two augmented views.

use crate::data::Graph;
use crate::seeding;
use crate::tensor::{Tape, TensorError, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("attribute width {got} does not match encoder input width {expected}")]
    AttrWidth { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ExpertError>;

/// Named parameter array, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Param {
    fn glorot(name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            name,
            rows,
            cols,
            values,
        }
    }

    fn zeros(name: String, rows: usize, cols: usize) -> Self {
        Self {
            name,
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    fn normal(name: String, rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let values = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Self {
            name,
            rows,
            cols,
            values,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> std::result::Result<TensorId, TensorError> {
        tape.leaf(self.values.clone(), self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetDims {
    pub input: usize,
    pub hidden: usize,
    pub z: usize,
    pub classes: usize,
    pub layers: usize,
}

impl NetDims {
    pub fn new(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: 64,
            z: 64,
            classes,
            layers: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SageLayer {
    pub w_self: Param,
    pub w_neigh: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub encoder: Vec<SageLayer>,
    pub projector: Mlp,
    pub classifier: Mlp,
    /// Trainable class anchors, `[classes × hidden]`. Anchors live in the
    /// encoder output space because they are scored against the unprojected
    /// view embedding.
    pub anchors: Param,
    /// Gating prototype, `[1 × classes]`, scored against logits.
    pub gate_proto: Param,
}

impl Expert {
    pub fn init(index: usize, dims: &NetDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[0x5eed, index as u64]));
        let tag = |part: &str| format!("expert{index}.{part}");
        let mut encoder = Vec::with_capacity(dims.layers);
        let mut width = dims.input;
        for layer in 0..dims.layers {
            encoder.push(SageLayer {
                w_self: Param::glorot(
                    tag(&format!("enc{layer}.w_self")),
                    width,
                    dims.hidden,
                    &mut rng,
                ),
                w_neigh: Param::glorot(
                    tag(&format!("enc{layer}.w_neigh")),
                    width,
                    dims.hidden,
                    &mut rng,
                ),
            });
            width = dims.hidden;
        }
        let mlp = |name: &str, out: usize, rng: &mut ChaCha8Rng| Mlp {
            w1: Param::glorot(tag(&format!("{name}.w1")), dims.hidden, dims.hidden, rng),
            b1: Param::zeros(tag(&format!("{name}.b1")), 1, dims.hidden),
            w2: Param::glorot(tag(&format!("{name}.w2")), dims.hidden, out, rng),
            b2: Param::zeros(tag(&format!("{name}.b2")), 1, out),
        };
        let projector = mlp("proj", dims.z, &mut rng);
        let classifier = mlp("clf", dims.classes, &mut rng);
        let anchors = Param::normal(tag("anchors"), dims.classes, dims.hidden, 0.1, &mut rng);
        let gate_proto = Param::normal(tag("gate"), 1, dims.classes, 0.1, &mut rng);
        Self {
            encoder,
            projector,
            classifier,
            anchors,
            gate_proto,
        }
    }

    /// Parameters in the bank's canonical order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for layer in &self.encoder {
            out.push(&layer.w_self);
            out.push(&layer.w_neigh);
        }
        for mlp in [&self.projector, &self.classifier] {
            out.extend([&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2]);
        }
        out.push(&self.anchors);
        out.push(&self.gate_proto);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for layer in &mut self.encoder {
            out.push(&mut layer.w_self);
            out.push(&mut layer.w_neigh);
        }
        for mlp in [&mut self.projector, &mut self.classifier] {
            out.push(&mut mlp.w1);
            out.push(&mut mlp.b1);
            out.push(&mut mlp.w2);
            out.push(&mut mlp.b2);
        }
        out.push(&mut self.anchors);
        out.push(&mut self.gate_proto);
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundExpert> {
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            encoder.push((layer.w_self.bind(tape)?, layer.w_neigh.bind(tape)?));
        }
        let bind_mlp = |mlp: &Mlp, tape: &mut Tape| -> std::result::Result<BoundMlp, TensorError> {
            Ok(BoundMlp {
                w1: mlp.w1.bind(tape)?,
                b1: mlp.b1.bind(tape)?,
                w2: mlp.w2.bind(tape)?,
                b2: mlp.b2.bind(tape)?,
            })
        };
        Ok(BoundExpert {
            encoder,
            projector: bind_mlp(&self.projector, tape)?,
            classifier: bind_mlp(&self.classifier, tape)?,
            anchors: self.anchors.bind(tape)?,
            gate_proto: self.gate_proto.bind(tape)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

/// Tape handles for one expert's parameters, in `Expert::params` order.
#[derive(Debug, Clone)]
pub struct BoundExpert {
    pub encoder: Vec<(TensorId, TensorId)>,
    pub projector: BoundMlp,
    pub classifier: BoundMlp,
    pub anchors: TensorId,
    pub gate_proto: TensorId,
}

impl BoundExpert {
    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for &(ws, wn) in &self.encoder {
            out.push(ws);
            out.push(wn);
        }
        for mlp in [&self.projector, &self.classifier] {
            out.extend([mlp.w1, mlp.b1, mlp.w2, mlp.b2]);
        }
        out.push(self.anchors);
        out.push(self.gate_proto);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertBank {
    pub dims: NetDims,
    pub experts: Vec<Expert>,
}

impl ExpertBank {
    pub fn init(expert_count: usize, dims: NetDims, seed: u64) -> Self {
        let experts = (0..expert_count)
            .map(|k| Expert::init(k, &dims, seed))
            .collect();
        Self { dims, experts }
    }

    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    /// All parameters of all experts, flattened in a stable order.
    pub fn params(&self) -> Vec<&Param> {
        self.experts.iter().flat_map(|e| e.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.experts
            .iter_mut()
            .flat_map(|e| e.params_mut())
            .collect()
    }
}

/// Disjoint union of a batch of graphs, ready for batched message passing.
struct BatchLayout {
    attrs: Vec<f64>,
    total_nodes: usize,
    /// Directed message endpoints: messages flow `src → dst`, both ways per
    /// undirected edge.
    msg_src: Vec<usize>,
    msg_dst: Vec<usize>,
    /// Node → position of its graph in the batch.
    graph_ids: Vec<usize>,
}

fn layout(graphs: &[&Graph], input_width: usize) -> Result<BatchLayout> {
    if graphs.is_empty() {
        return Err(ExpertError::EmptyBatch);
    }
    let total_nodes: usize = graphs.iter().map(|g| g.node_count).sum();
    let mut attrs = Vec::with_capacity(total_nodes * input_width);
    let mut msg_src = Vec::new();
    let mut msg_dst = Vec::new();
    let mut graph_ids = Vec::with_capacity(total_nodes);
    let mut offset = 0;
    for (b, g) in graphs.iter().enumerate() {
        if g.attr_dim != input_width {
            return Err(ExpertError::AttrWidth {
                expected: input_width,
                got: g.attr_dim,
            });
        }
        attrs.extend_from_slice(&g.node_attrs);
        for &(u, v) in &g.edges {
            msg_src.push(offset + u);
            msg_dst.push(offset + v);
            msg_src.push(offset + v);
            msg_dst.push(offset + u);
        }
        graph_ids.extend(std::iter::repeat_n(b, g.node_count));
        offset += g.node_count;
    }
    Ok(BatchLayout {
        attrs,
        total_nodes,
        msg_src,
        msg_dst,
        graph_ids,
    })
}

/// Encode a batch of graphs into `[B × hidden]` graph embeddings on the
/// tape. The batch is processed as one disjoint-union graph.
pub fn encode_batch(
    tape: &mut Tape,
    graphs: &[&Graph],
    bound: &BoundExpert,
    dims: &NetDims,
) -> Result<TensorId> {
    let lay = layout(graphs, dims.input)?;
    let mut h = tape.leaf(lay.attrs.clone(), lay.total_nodes, dims.input)?;
    for (layer, &(w_self, w_neigh)) in bound.encoder.iter().enumerate() {
        let width = if layer == 0 { dims.input } else { dims.hidden };
        let neigh = if lay.msg_src.is_empty() {
            tape.leaf(vec![0.0; lay.total_nodes * width], lay.total_nodes, width)?
        } else {
            let msgs = tape.gather_rows(h, &lay.msg_src)?;
            tape.scatter_mean(msgs, &lay.msg_dst, lay.total_nodes)?
        };
        let own = tape.matmul(h, w_self)?;
        let agg = tape.matmul(neigh, w_neigh)?;
        let pre = tape.add(own, agg)?;
        h = tape.relu(pre)?;
    }
    Ok(tape.scatter_mean(h, &lay.graph_ids, graphs.len())?)
}

/// Encode a single graph into its `[1 × hidden]` embedding.
pub fn encode(tape: &mut Tape, g: &Graph, bound: &BoundExpert, dims: &NetDims) -> Result<TensorId> {
    encode_batch(tape, &[g], bound, dims)
}

fn mlp_forward(
    tape: &mut Tape,
    h: TensorId,
    mlp: &BoundMlp,
) -> std::result::Result<TensorId, TensorError> {
    let z1 = tape.matmul(h, mlp.w1)?;
    let z1 = tape.add_row(z1, mlp.b1)?;
    let a1 = tape.relu(z1)?;
    let z2 = tape.matmul(a1, mlp.w2)?;
    tape.add_row(z2, mlp.b2)
}

/// Project embeddings into the contrastive space; rows are L2-normalized.
pub fn project(tape: &mut Tape, h: TensorId, bound: &BoundExpert) -> Result<TensorId> {
    let z = mlp_forward(tape, h, &bound.projector)?;
    Ok(tape.l2_normalize_rows(z)?)
}

/// Class logits `[B × classes]` from graph embeddings.
pub fn classify(tape: &mut Tape, h: TensorId, bound: &BoundExpert) -> Result<TensorId> {
    Ok(mlp_forward(tape, h, &bound.classifier)?)
}
