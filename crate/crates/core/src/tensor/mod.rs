//! Dense reverse-mode automatic differentiation on two-dimensional f64
//! tensors.
//!
//! A [`Tape`] owns every tensor created through it. Each operation runs its
//! forward computation eagerly, records a backward rule, and returns a
//! [`TensorId`] handle. Calling [`Tape::backward`] on a scalar node fills the
//! gradient of every ancestor. A tape is built fresh for each training step
//! and dropped afterwards; it is single-owner and single-threaded.
//!
//! Every value is `f64`. Any operation that produces a NaN or an infinity
//! fails immediately with [`TensorError::NonFinite`] instead of letting the
//! value propagate.
//!
//! Shape rules (rows × cols, no broadcasting):
//!
//! | op                      | inputs                  | output    |
//! |-------------------------|-------------------------|-----------|
//! | `matmul`                | `[r×k]`, `[k×c]`        | `[r×c]`   |
//! | `matmul_t`              | `[r×k]`, `[c×k]`        | `[r×c]` (A·Bᵀ) |
//! | `add/sub/mul/div`       | `[r×c]`, `[r×c]`        | `[r×c]` elementwise |
//! | `add_row`               | `[r×c]`, `[1×c]`        | `[r×c]` (vector added to each row) |
//! | `sub_col`               | `[r×c]`, `[r×1]`        | `[r×c]` (vector subtracted from each column) |
//! | `scale`                 | `[r×c]`, scalar const   | `[r×c]`   |
//! | `relu/exp/log/clamp_min`| `[r×c]`                 | `[r×c]` elementwise |
//! | `gather_rows`           | `[r×c]`, indices `[m]`  | `[m×c]`   |
//! | `scatter_mean`          | `[m×c]`, indices `[m]`, `out_rows` | `[out_rows×c]`; each output row is the mean of the input rows scattered onto it, zero if none |
//! | `concat_rows`           | `[r_i×c]` each          | `[Σr_i×c]` |
//! | `concat_cols`           | `[r×c_i]` each          | `[r×Σc_i]` |
//! | `l2_normalize_rows`     | `[r×c]`                 | `[r×c]`; zero rows pass through unchanged and are counted |
//! | `dot_rows`              | `[r×c]`, `[r×c]`        | `[r×1]` rowwise dot |
//! | `sum_rows`              | `[r×c]`                 | `[r×1]`   |
//! | `sum_all`               | `[r×c]`                 | `[1×1]`   |
//! | `log_sum_exp_rows`      | `[r×c]`                 | `[r×1]`, numerically stable |
//! | `log_sum_exp_with_prior`| `[1×m]`, priors `[m]`   | `[1×1]`, `LSE(x + log_prior)` |
//! | `detach`                | `[r×c]`                 | `[r×c]`, gradient barrier |

pub mod gradcheck;

use thiserror::Error;

/// Rows below this Euclidean norm are treated as zero by
/// `l2_normalize_rows` so the division cannot overflow.
const MIN_ROW_NORM: f64 = 1e-150;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward was already run on this tape")]
    BackwardAlreadyRun,
    #[error("backward requires a [1x1] loss, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("gradients are not available before backward")]
    NoGradients,
}

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    MatmulT(TensorId, TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    SubCol(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    ClampMin(TensorId, f64),
    GatherRows(TensorId, Vec<usize>),
    ScatterMean(TensorId, Vec<usize>),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    L2NormalizeRows(TensorId),
    DotRows(TensorId, TensorId),
    SumRows(TensorId),
    SumAll(TensorId),
    LogSumExpRows(TensorId),
    Detach,
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

/// Recording tape. Operations append nodes; `backward` walks them in
/// reverse. Parents always precede children, so the insertion order is a
/// valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<f64>>>,
    zero_norm_rows: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of zero rows encountered by `l2_normalize_rows` so far.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a `[1x1]` node.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let n = &self.nodes[id.0];
        if (n.rows, n.cols) != (1, 1) {
            return Err(TensorError::NonScalarLoss((n.rows, n.cols)));
        }
        Ok(n.values[0])
    }

    /// Gradient of a node; only available after [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Result<&[f64]> {
        match &self.grads {
            Some(g) => Ok(&g[id.0]),
            None => Err(TensorError::NoGradients),
        }
    }

    fn check_shape(op: &'static str, rows: usize, cols: usize, len: usize) -> Result<()> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("dimensions must be positive, got {rows}x{cols}"),
            });
        }
        if rows * cols != len {
            return Err(TensorError::Invalid {
                op,
                msg: format!("{rows}x{cols} does not match {len} values"),
            });
        }
        Ok(())
    }

    fn push(
        &mut self,
        op_name: &'static str,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        op: Op,
    ) -> Result<TensorId> {
        debug_assert_eq!(rows * cols, values.len());
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            rows,
            cols,
            values,
            op,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Register an input tensor. Leaves receive gradients like every other
    /// node; whether they are parameters or constants is the caller's
    /// bookkeeping.
    pub fn leaf(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> Result<TensorId> {
        Self::check_shape("leaf", rows, cols, values.len())?;
        self.push("leaf", rows, cols, values, Op::Leaf)
    }

    /// Register a `[1xn]` row-vector leaf.
    pub fn row(&mut self, values: Vec<f64>) -> Result<TensorId> {
        let n = values.len();
        self.leaf(values, 1, n)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.cols != nb.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: (na.rows, na.cols),
                rhs: (nb.rows, nb.cols),
            });
        }
        let (r, k, c) = (na.rows, na.cols, nb.cols);
        let mut out = vec![0.0; r * c];
        matmul_acc(&na.values, &nb.values, r, k, c, &mut out);
        self.push("matmul", r, c, out, Op::Matmul(a, b))
    }

    /// `A · Bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.cols != nb.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_t",
                lhs: (na.rows, na.cols),
                rhs: (nb.rows, nb.cols),
            });
        }
        let (r, k, s) = (na.rows, na.cols, nb.rows);
        let mut out = vec![0.0; r * s];
        for i in 0..r {
            let ra = &na.values[i * k..(i + 1) * k];
            for j in 0..s {
                let rb = &nb.values[j * k..(j + 1) * k];
                out[i * s + j] = dot(ra, rb);
            }
        }
        self.push("matmul_t", r, s, out, Op::MatmulT(a, b))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        if (na.rows, na.cols) != (nb.rows, nb.cols) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: (na.rows, na.cols),
                rhs: (nb.rows, nb.cols),
            });
        }
        let out: Vec<f64> = na
            .values
            .iter()
            .zip(&nb.values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let (r, c) = (na.rows, na.cols);
        self.push(op_name, r, c, out, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Add a `[1xc]` row vector to every row of `x`.
    pub fn add_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (nx, nv) = (self.node(x), self.node(v));
        if nv.rows != 1 || nv.cols != nx.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: (nx.rows, nx.cols),
                rhs: (nv.rows, nv.cols),
            });
        }
        let (r, c) = (nx.rows, nx.cols);
        let mut out = nx.values.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += nv.values[j];
            }
        }
        self.push("add_row", r, c, out, Op::AddRow(x, v))
    }

    /// Subtract a `[rx1]` column vector from every column of `x`.
    pub fn sub_col(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (nx, nv) = (self.node(x), self.node(v));
        if nv.cols != 1 || nv.rows != nx.rows {
            return Err(TensorError::ShapeMismatch {
                op: "sub_col",
                lhs: (nx.rows, nx.cols),
                rhs: (nv.rows, nv.cols),
            });
        }
        let (r, c) = (nx.rows, nx.cols);
        let mut out = nx.values.clone();
        for i in 0..r {
            let s = nv.values[i];
            for j in 0..c {
                out[i * c + j] -= s;
            }
        }
        self.push("sub_col", r, c, out, Op::SubCol(x, v))
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        if !factor.is_finite() {
            return Err(TensorError::NonFinite { op: "scale" });
        }
        let n = self.node(x);
        let out: Vec<f64> = n.values.iter().map(|&v| v * factor).collect();
        let (r, c) = (n.rows, n.cols);
        self.push("scale", r, c, out, Op::Scale(x, factor))
    }

    fn map(
        &mut self,
        op_name: &'static str,
        x: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let n = self.node(x);
        let out: Vec<f64> = n.values.iter().map(|&v| f(v)).collect();
        let (r, c) = (n.rows, n.cols);
        self.push(op_name, r, c, out, op)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    pub fn clamp_min(&mut self, x: TensorId, floor: f64) -> Result<TensorId> {
        self.map("clamp_min", x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    /// Select the given rows of `x`, in order, possibly with repeats.
    pub fn gather_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let n = self.node(x);
        if indices.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n.rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {} rows", n.rows),
            });
        }
        let c = n.cols;
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&n.values[i * c..(i + 1) * c]);
        }
        let rows = indices.len();
        self.push(
            "gather_rows",
            rows,
            c,
            out,
            Op::GatherRows(x, indices.to_vec()),
        )
    }

    /// Scatter the rows of `x` onto `out_rows` buckets and average each
    /// bucket. Buckets that receive nothing stay zero.
    pub fn scatter_mean(
        &mut self,
        x: TensorId,
        indices: &[usize],
        out_rows: usize,
    ) -> Result<TensorId> {
        let n = self.node(x);
        if indices.len() != n.rows {
            return Err(TensorError::Invalid {
                op: "scatter_mean",
                msg: format!("{} indices for {} rows", indices.len(), n.rows),
            });
        }
        if out_rows == 0 {
            return Err(TensorError::Invalid {
                op: "scatter_mean",
                msg: "out_rows must be positive".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= out_rows) {
            return Err(TensorError::Invalid {
                op: "scatter_mean",
                msg: format!("target index {bad} out of range for {out_rows} rows"),
            });
        }
        let c = n.cols;
        let mut out = vec![0.0; out_rows * c];
        let mut counts = vec![0usize; out_rows];
        for (row, &t) in indices.iter().enumerate() {
            counts[t] += 1;
            let src = &n.values[row * c..(row + 1) * c];
            let dst = &mut out[t * c..(t + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        for (t, &cnt) in counts.iter().enumerate() {
            if cnt > 1 {
                let inv = 1.0 / cnt as f64;
                for v in &mut out[t * c..(t + 1) * c] {
                    *v *= inv;
                }
            }
        }
        self.push(
            "scatter_mean",
            out_rows,
            c,
            out,
            Op::ScatterMean(x, indices.to_vec()),
        )
    }

    /// Stack tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_rows",
                msg: "no inputs".into(),
            });
        }
        let c = self.node(parts[0]).cols;
        let mut rows = 0;
        for &p in parts {
            let n = self.node(p);
            if n.cols != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: (self.node(parts[0]).rows, c),
                    rhs: (n.rows, n.cols),
                });
            }
            rows += n.rows;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(&self.node(p).values);
        }
        self.push("concat_rows", rows, c, out, Op::ConcatRows(parts.to_vec()))
    }

    /// Place tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        }
        let r = self.node(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let n = self.node(p);
            if n.rows != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: (r, self.node(parts[0]).cols),
                    rhs: (n.rows, n.cols),
                });
            }
            cols += n.cols;
        }
        let mut out = vec![0.0; r * cols];
        let mut offset = 0;
        for &p in parts {
            let n = self.node(p);
            for i in 0..r {
                out[i * cols + offset..i * cols + offset + n.cols]
                    .copy_from_slice(&n.values[i * n.cols..(i + 1) * n.cols]);
            }
            offset += n.cols;
        }
        self.push("concat_cols", r, cols, out, Op::ConcatCols(parts.to_vec()))
    }

    /// Normalize every row to unit Euclidean norm. Zero rows pass through
    /// unchanged and bump the diagnostic counter instead of erroring; they
    /// occur transiently at initialization.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.node(x);
        let (r, c) = (n.rows, n.cols);
        let mut out = n.values.clone();
        let mut zero_rows = 0;
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let norm = dot(row, row).sqrt();
            if norm < MIN_ROW_NORM {
                zero_rows += 1;
            } else {
                let inv = 1.0 / norm;
                for v in row {
                    *v *= inv;
                }
            }
        }
        self.zero_norm_rows += zero_rows;
        self.push("l2_normalize_rows", r, c, out, Op::L2NormalizeRows(x))
    }

    /// Rowwise dot product of two equally shaped tensors.
    pub fn dot_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, nb) = (self.node(a), self.node(b));
        if (na.rows, na.cols) != (nb.rows, nb.cols) {
            return Err(TensorError::ShapeMismatch {
                op: "dot_rows",
                lhs: (na.rows, na.cols),
                rhs: (nb.rows, nb.cols),
            });
        }
        let (r, c) = (na.rows, na.cols);
        let out: Vec<f64> = (0..r)
            .map(|i| {
                dot(
                    &na.values[i * c..(i + 1) * c],
                    &nb.values[i * c..(i + 1) * c],
                )
            })
            .collect();
        self.push("dot_rows", r, 1, out, Op::DotRows(a, b))
    }

    pub fn sum_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.node(x);
        let (r, c) = (n.rows, n.cols);
        let out: Vec<f64> = (0..r)
            .map(|i| n.values[i * c..(i + 1) * c].iter().sum())
            .collect();
        self.push("sum_rows", r, 1, out, Op::SumRows(x))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.node(x);
        let total: f64 = n.values.iter().sum();
        self.push("sum_all", 1, 1, vec![total], Op::SumAll(x))
    }

    /// Stable `log Σ_j exp(x_ij)` per row.
    pub fn log_sum_exp_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.node(x);
        let (r, c) = (n.rows, n.cols);
        let out: Vec<f64> = (0..r)
            .map(|i| log_sum_exp(&n.values[i * c..(i + 1) * c]))
            .collect();
        self.push("log_sum_exp_rows", r, 1, out, Op::LogSumExpRows(x))
    }

    /// `log Σ_m prior_m · exp(x_m)` for a `[1xm]` logit row, evaluated as
    /// `LSE(x + log prior)`. The stable kernel behind the class-frequency
    /// weighted softmax.
    pub fn log_sum_exp_with_prior(
        &mut self,
        logits: TensorId,
        log_priors: &[f64],
    ) -> Result<TensorId> {
        let n = self.node(logits);
        if n.rows != 1 || n.cols != log_priors.len() {
            return Err(TensorError::ShapeMismatch {
                op: "log_sum_exp_with_prior",
                lhs: (n.rows, n.cols),
                rhs: (1, log_priors.len()),
            });
        }
        if log_priors.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "log_sum_exp_with_prior",
            });
        }
        let prior = self.leaf(log_priors.to_vec(), 1, log_priors.len())?;
        let shifted = self.add(logits, prior)?;
        self.log_sum_exp_rows(shifted)
    }

    /// Copy `x` out of the gradient flow.
    pub fn detach(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.node(x);
        let (r, c) = (n.rows, n.cols);
        let values = n.values.clone();
        self.push("detach", r, c, values, Op::Detach)
    }

    /// Reverse pass from a `[1x1]` loss. Fills every node's gradient with
    /// `∂loss/∂node`; the seed gradient is 1. May be called once per tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.grads.is_some() {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let ln = self.node(loss);
        if (ln.rows, ln.cols) != (1, 1) {
            return Err(TensorError::NonScalarLoss((ln.rows, ln.cols)));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|&v| v == 0.0) {
                grads[i] = g;
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (ar, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let c = self.nodes[b.0].cols;
                    // ga += g · bᵀ
                    {
                        let bv = &self.nodes[b.0].values;
                        let ga = &mut grads[a.0];
                        for i2 in 0..ar {
                            for kk in 0..k {
                                ga[i2 * k + kk] +=
                                    dot(&g[i2 * c..(i2 + 1) * c], &bv[kk * c..(kk + 1) * c]);
                            }
                        }
                    }
                    // gb += aᵀ · g
                    {
                        let av = &self.nodes[a.0].values;
                        let gb = &mut grads[b.0];
                        for i2 in 0..ar {
                            for kk in 0..k {
                                let aik = av[i2 * k + kk];
                                if aik != 0.0 {
                                    let gr = &g[i2 * c..(i2 + 1) * c];
                                    let dst = &mut gb[kk * c..(kk + 1) * c];
                                    for (d, gv) in dst.iter_mut().zip(gr) {
                                        *d += aik * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MatmulT(a, b) => {
                    let (ar, k) = (self.nodes[a.0].rows, self.nodes[a.0].cols);
                    let s = self.nodes[b.0].rows;
                    // ga += g · b
                    {
                        let bv = &self.nodes[b.0].values;
                        let ga = &mut grads[a.0];
                        for i2 in 0..ar {
                            let gr = &g[i2 * s..(i2 + 1) * s];
                            for (j, &gv) in gr.iter().enumerate() {
                                if gv != 0.0 {
                                    let br = &bv[j * k..(j + 1) * k];
                                    let dst = &mut ga[i2 * k..(i2 + 1) * k];
                                    for (d, bvv) in dst.iter_mut().zip(br) {
                                        *d += gv * bvv;
                                    }
                                }
                            }
                        }
                    }
                    // gb += gᵀ · a
                    {
                        let av = &self.nodes[a.0].values;
                        let gb = &mut grads[b.0];
                        for i2 in 0..ar {
                            let ar_slice = &av[i2 * k..(i2 + 1) * k];
                            let gr = &g[i2 * s..(i2 + 1) * s];
                            for (j, &gv) in gr.iter().enumerate() {
                                if gv != 0.0 {
                                    let dst = &mut gb[j * k..(j + 1) * k];
                                    for (d, avv) in dst.iter_mut().zip(ar_slice) {
                                        *d += gv * avv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g, 1.0);
                    accumulate(&mut grads[b.0], &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], &g, 1.0);
                    accumulate(&mut grads[b.0], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    {
                        let bv = &self.nodes[b.0].values;
                        let ga = &mut grads[a.0];
                        for ((d, &gv), &bvv) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += gv * bvv;
                        }
                    }
                    {
                        let av = &self.nodes[a.0].values;
                        let gb = &mut grads[b.0];
                        for ((d, &gv), &avv) in gb.iter_mut().zip(&g).zip(av) {
                            *d += gv * avv;
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    {
                        let bv = &self.nodes[b.0].values;
                        let ga = &mut grads[a.0];
                        for ((d, &gv), &bvv) in ga.iter_mut().zip(&g).zip(bv) {
                            *d += gv / bvv;
                        }
                    }
                    {
                        let av = &self.nodes[a.0].values;
                        let bv = &self.nodes[b.0].values;
                        let gb = &mut grads[b.0];
                        for i2 in 0..gb.len() {
                            gb[i2] -= g[i2] * av[i2] / (bv[i2] * bv[i2]);
                        }
                    }
                }
                Op::AddRow(x, v) => {
                    let c = self.nodes[v.0].cols;
                    accumulate(&mut grads[x.0], &g, 1.0);
                    let gv = &mut grads[v.0];
                    for (idx, &gval) in g.iter().enumerate() {
                        gv[idx % c] += gval;
                    }
                }
                Op::SubCol(x, v) => {
                    let c = self.nodes[x.0].cols;
                    accumulate(&mut grads[x.0], &g, 1.0);
                    let gv = &mut grads[v.0];
                    for (idx, &gval) in g.iter().enumerate() {
                        gv[idx / c] -= gval;
                    }
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads[x.0], &g, *factor);
                }
                Op::Relu(x) => {
                    let x = *x;
                    let xv = &self.nodes[x.0].values;
                    let gx = &mut grads[x.0];
                    for ((d, &gv), &xvv) in gx.iter_mut().zip(&g).zip(xv) {
                        if xvv > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Exp(x) => {
                    let out = &node.values;
                    let gx = &mut grads[x.0];
                    for ((d, &gv), &ov) in gx.iter_mut().zip(&g).zip(out) {
                        *d += gv * ov;
                    }
                }
                Op::Log(x) => {
                    let x = *x;
                    let xv = &self.nodes[x.0].values;
                    let gx = &mut grads[x.0];
                    for ((d, &gv), &xvv) in gx.iter_mut().zip(&g).zip(xv) {
                        *d += gv / xvv;
                    }
                }
                Op::ClampMin(x, floor) => {
                    let (x, floor) = (*x, *floor);
                    let xv = &self.nodes[x.0].values;
                    let gx = &mut grads[x.0];
                    for ((d, &gv), &xvv) in gx.iter_mut().zip(&g).zip(xv) {
                        if xvv > floor {
                            *d += gv;
                        }
                    }
                }
                Op::GatherRows(x, indices) => {
                    let c = self.nodes[x.0].cols;
                    let gx = &mut grads[x.0];
                    for (row, &src) in indices.iter().enumerate() {
                        let gr = &g[row * c..(row + 1) * c];
                        let dst = &mut gx[src * c..(src + 1) * c];
                        for (d, gv) in dst.iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
                Op::ScatterMean(x, indices) => {
                    let c = self.nodes[x.0].cols;
                    let mut counts = vec![0usize; node.rows];
                    for &t in indices {
                        counts[t] += 1;
                    }
                    let gx = &mut grads[x.0];
                    for (row, &t) in indices.iter().enumerate() {
                        let inv = 1.0 / counts[t] as f64;
                        let gr = &g[t * c..(t + 1) * c];
                        let dst = &mut gx[row * c..(row + 1) * c];
                        for (d, gv) in dst.iter_mut().zip(gr) {
                            *d += gv * inv;
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].values.len();
                        accumulate(&mut grads[p.0], &g[offset..offset + len], 1.0);
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total_c = node.cols;
                    let r = node.rows;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].cols;
                        let gp = &mut grads[p.0];
                        for i2 in 0..r {
                            let src = &g[i2 * total_c + offset..i2 * total_c + offset + pc];
                            let dst = &mut gp[i2 * pc..(i2 + 1) * pc];
                            for (d, gv) in dst.iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                        offset += pc;
                    }
                }
                Op::L2NormalizeRows(x) => {
                    let x = *x;
                    let c = node.cols;
                    let out = &node.values;
                    let xv = &self.nodes[x.0].values;
                    let gx = &mut grads[x.0];
                    for i2 in 0..node.rows {
                        let xr = &xv[i2 * c..(i2 + 1) * c];
                        let norm = dot(xr, xr).sqrt();
                        if norm < MIN_ROW_NORM {
                            continue;
                        }
                        let yr = &out[i2 * c..(i2 + 1) * c];
                        let gr = &g[i2 * c..(i2 + 1) * c];
                        let gy = dot(gr, yr);
                        let dst = &mut gx[i2 * c..(i2 + 1) * c];
                        for j in 0..c {
                            dst[j] += (gr[j] - gy * yr[j]) / norm;
                        }
                    }
                }
                Op::DotRows(a, b) => {
                    let (a, b) = (*a, *b);
                    let c = self.nodes[a.0].cols;
                    {
                        let bv = &self.nodes[b.0].values;
                        let ga = &mut grads[a.0];
                        for (i2, &gv) in g.iter().enumerate() {
                            if gv != 0.0 {
                                let br = &bv[i2 * c..(i2 + 1) * c];
                                let dst = &mut ga[i2 * c..(i2 + 1) * c];
                                for (d, bvv) in dst.iter_mut().zip(br) {
                                    *d += gv * bvv;
                                }
                            }
                        }
                    }
                    {
                        let av = &self.nodes[a.0].values;
                        let gb = &mut grads[b.0];
                        for (i2, &gv) in g.iter().enumerate() {
                            if gv != 0.0 {
                                let ar = &av[i2 * c..(i2 + 1) * c];
                                let dst = &mut gb[i2 * c..(i2 + 1) * c];
                                for (d, avv) in dst.iter_mut().zip(ar) {
                                    *d += gv * avv;
                                }
                            }
                        }
                    }
                }
                Op::SumRows(x) => {
                    let c = self.nodes[x.0].cols;
                    let gx = &mut grads[x.0];
                    for (i2, &gv) in g.iter().enumerate() {
                        for d in &mut gx[i2 * c..(i2 + 1) * c] {
                            *d += gv;
                        }
                    }
                }
                Op::SumAll(x) => {
                    let gv = g[0];
                    for d in grads[x.0].iter_mut() {
                        *d += gv;
                    }
                }
                Op::LogSumExpRows(x) => {
                    let x = *x;
                    let c = self.nodes[x.0].cols;
                    let xv = &self.nodes[x.0].values;
                    let out = &node.values;
                    let gx = &mut grads[x.0];
                    for (i2, &gv) in g.iter().enumerate() {
                        if gv != 0.0 {
                            let lse = out[i2];
                            let xr = &xv[i2 * c..(i2 + 1) * c];
                            let dst = &mut gx[i2 * c..(i2 + 1) * c];
                            for (d, &xvv) in dst.iter_mut().zip(xr) {
                                *d += gv * (xvv - lse).exp();
                            }
                        }
                    }
                }
                Op::Detach => {}
            }
            grads[i] = g;
        }
        self.grads = Some(grads);
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * factor;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn matmul_acc(a: &[f64], b: &[f64], r: usize, k: usize, c: usize, out: &mut [f64]) {
    for i in 0..r {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik != 0.0 {
                let br = &b[kk * c..(kk + 1) * c];
                let dst = &mut out[i * c..(i + 1) * c];
                for (d, &bv) in dst.iter_mut().zip(br) {
                    *d += aik * bv;
                }
            }
        }
    }
}

/// Stable log-sum-exp of a slice: `max + log Σ exp(x − max)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Plain-slice version of [`Tape::log_sum_exp_with_prior`]:
/// `log Σ_m prior_m exp(logit_m)` with the priors given in log space.
pub fn log_sum_exp_with_prior(
    logits: &[f64],
    log_priors: &[f64],
) -> std::result::Result<f64, TensorError> {
    if logits.is_empty() || logits.len() != log_priors.len() {
        return Err(TensorError::Invalid {
            op: "log_sum_exp_with_prior",
            msg: format!(
                "need equal non-empty lengths, got {} and {}",
                logits.len(),
                log_priors.len()
            ),
        });
    }
    let shifted: Vec<f64> = logits
        .iter()
        .zip(log_priors)
        .map(|(&o, &p)| o + p)
        .collect();
    Ok(log_sum_exp(&shifted))
}
