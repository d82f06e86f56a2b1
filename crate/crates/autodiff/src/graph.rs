//! Tape of 2-D tensor operations with reverse-mode accumulation.
//!
//! Every node holds a `rows x cols` row-major value. Nodes are appended in
//! evaluation order, so the tape is acyclic by construction and backward is a
//! single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{matmul, matmul_nt, matmul_tn};
use crate::tensor::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRows(ParamId, Vec<usize>, usize),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    GatherElems(NodeId, Vec<usize>),
    SliceCols(NodeId, usize),
    GroupMean(NodeId, Vec<Vec<usize>>),
    RowDot(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Tanh(NodeId),
    Dropout(NodeId, Vec<f64>),
    Sum(NodeId),
    Bce {
        logits: NodeId,
        targets: Vec<f64>,
        mask: Vec<f64>,
        denom: f64,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// A single forward computation. Build it, read values, optionally call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    training: bool,
    rng: ChaCha8Rng,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

impl Graph {
    /// Evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training graph: dropout masks are drawn from a generator seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.shape(id)
    }

    // ---- leaves ----

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<NodeId> {
        if rows * cols != value.len() {
            return Err(shape_err(
                "constant",
                format!("[{rows}, {cols}] with {} values", value.len()),
            ));
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    /// Trainable parameter. Repeated calls for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let t = store.tensor(id);
        let (r, c) = t.dims2();
        let node = self.push(r, c, t.values().to_vec(), Op::Param(id));
        self.params.insert(id, node);
        node
    }

    /// Embedding lookup: gathers `rows` of a parameter matrix without copying
    /// the whole table onto the tape.
    pub fn embedding(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<NodeId> {
        let t = store.tensor(id);
        let (r, c) = t.dims2();
        let mut value = Vec::with_capacity(rows.len() * c);
        for &row in rows {
            if row >= r {
                return Err(shape_err(
                    "embedding",
                    format!("row {row} of table [{r}, {c}]"),
                ));
            }
            value.extend_from_slice(&t.values()[row * c..(row + 1) * c]);
        }
        Ok(self.push(rows.len(), c, value, Op::ParamRows(id, rows.to_vec(), r * c)))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let value = matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(shape_err("add", format!("[{ra}, {ca}] + [{rb}, {cb}]")));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(ra, ca, value, Op::Add(a, b)))
    }

    /// `a [r, c] + b` where `b` is `[1, c]` (row bias) or `[1, 1]` (scalar).
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if rb != 1 || (cb != c && cb != 1) {
            return Err(shape_err("add_row", format!("[{r}, {c}] + [{rb}, {cb}]")));
        }
        let bv = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(idx, x)| x + if cb == 1 { bv[0] } else { bv[idx % c] })
            .collect();
        Ok(self.push(r, c, value, Op::AddRow(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(shape_err("mul", format!("[{ra}, {ca}] * [{rb}, {cb}]")));
        }
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(ra, ca, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, value, Op::Scale(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_cols", "no operands".into()));
        };
        let rows = self.dims(first).0;
        if let Some(&bad) = parts.iter().find(|p| self.dims(**p).0 != rows) {
            return Err(shape_err(
                "concat_cols",
                format!("row counts {rows} and {}", self.dims(bad).0),
            ));
        }
        let cols: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                value.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", "no operands".into()));
        };
        let cols = self.dims(first).1;
        if let Some(&bad) = parts.iter().find(|p| self.dims(**p).1 != cols) {
            return Err(shape_err(
                "concat_rows",
                format!("column counts {cols} and {}", self.dims(bad).1),
            ));
        }
        let rows: usize = parts.iter().map(|p| self.dims(*p).0).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        Ok(self.push(rows, cols, value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut value = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(shape_err("gather_rows", format!("row {i} of [{r}, {c}]")));
            }
            value.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(rows.len(), c, value, Op::GatherRows(a, rows.to_vec())))
    }

    /// Picks flat (row-major) element indices into a `[len, 1]` column.
    pub fn gather_elems(&mut self, a: NodeId, flat: &[usize]) -> Result<NodeId> {
        let src = self.value(a);
        let mut value = Vec::with_capacity(flat.len());
        for &i in flat {
            match src.get(i) {
                Some(v) => value.push(*v),
                None => {
                    let (r, c) = self.dims(a);
                    return Err(shape_err("gather_elems", format!("index {i} of [{r}, {c}]")));
                }
            }
        }
        Ok(self.push(flat.len(), 1, value, Op::GatherElems(a, flat.to_vec())))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return Err(shape_err("slice_cols", format!("[{start}, {end}) of [{r}, {c}]")));
        }
        let w = end - start;
        let src = self.value(a);
        let mut value = Vec::with_capacity(r * w);
        for i in 0..r {
            value.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        Ok(self.push(r, w, value, Op::SliceCols(a, start)))
    }

    /// Row `g` of the output is the mean of the input rows listed in `groups[g]`;
    /// an empty group yields a zero row.
    pub fn group_mean(&mut self, a: NodeId, groups: &[Vec<usize>]) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut value = vec![0.0; groups.len() * c];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let inv = 1.0 / rows.len() as f64;
            let out = &mut value[g * c..(g + 1) * c];
            for &i in rows {
                if i >= r {
                    return Err(shape_err("group_mean", format!("row {i} of [{r}, {c}]")));
                }
                for (o, v) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                    *o += v * inv;
                }
            }
        }
        Ok(self.push(groups.len(), c, value, Op::GroupMean(a, groups.to_vec())))
    }

    /// Mean over rows in `[start, end)`, as a `[1, c]` row.
    pub fn mean_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if start >= end || end > r {
            return Err(shape_err("mean_rows", format!("rows [{start}, {end}) of [{r}, {c}]")));
        }
        self.group_mean(a, &[(start..end).collect()])
    }

    /// Row-wise dot product of two `[n, c]` operands, giving `[n, 1]`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if (ra, ca) != (rb, cb) {
            return Err(shape_err("row_dot", format!("[{ra}, {ca}] . [{rb}, {cb}]")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let value = (0..ra)
            .map(|i| {
                av[i * ca..(i + 1) * ca]
                    .iter()
                    .zip(&bv[i * ca..(i + 1) * ca])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        Ok(self.push(ra, 1, value, Op::RowDot(a, b)))
    }

    /// Bilinear form `x_i^T W y_i` for each row pair, giving `[n, 1]`.
    pub fn bilinear(&mut self, x: NodeId, w: NodeId, y: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.row_dot(xw, y)
    }

    // ---- normalisation and activations ----

    /// Row-wise layer normalisation with `[1, c]` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        if self.dims(gamma) != (1, c) || self.dims(beta) != (1, c) {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x [{r}, {c}], gamma {:?}, beta {:?}",
                    self.dims(gamma),
                    self.dims(beta)
                ),
            ));
        }
        let src = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                value[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            r,
            c,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax along each row.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                value[i * c + j] = e;
                z += e;
            }
            for v in &mut value[i * c..(i + 1) * c] {
                *v /= z;
            }
        }
        self.push(r, c, value, Op::Softmax(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(r, c, value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(r, c, value, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let value = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
            .collect();
        self.push(r, c, value, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(r, c, value, Op::Tanh(a))
    }

    /// Inverted dropout with drop probability `p`. Identity outside training.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} not in [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.dims(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.push(r, c, value, Op::Dropout(a, mask)))
    }

    /// Dropout with an explicit mask (already scaled).
    pub fn dropout_with_mask(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let (r, c) = self.dims(a);
        if mask.len() != r * c {
            return Err(shape_err("dropout", format!("mask of {} for [{r}, {c}]", mask.len())));
        }
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.push(r, c, value, Op::Dropout(a, mask)))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Masked mean of element-wise binary cross-entropy computed from logits.
    /// Uses `max(z, 0) - z y + ln(1 + exp(-|z|))`, so saturated logits do not
    /// overflow. A fully masked input has loss 0.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &[f64],
        mask: Option<&[f64]>,
    ) -> Result<NodeId> {
        let (r, c) = self.dims(logits);
        let n = r * c;
        if targets.len() != n || mask.is_some_and(|m| m.len() != n) {
            return Err(shape_err(
                "bce_with_logits",
                format!(
                    "logits [{r}, {c}], targets {}, mask {:?}",
                    targets.len(),
                    mask.map(<[f64]>::len)
                ),
            ));
        }
        if let Some(t) = targets.iter().find(|t| **t != 0.0 && **t != 1.0) {
            return Err(Error::Contract(format!("bce target {t} is not binary")));
        }
        let mask = mask.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
        let denom: f64 = mask.iter().sum();
        let value = if denom == 0.0 {
            0.0
        } else {
            self.value(logits)
                .iter()
                .zip(targets)
                .zip(&mask)
                .map(|((&z, &y), &m)| m * bce_term(z, y))
                .sum::<f64>()
                / denom
        };
        Ok(self.push(
            1,
            1,
            vec![value],
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                mask,
                denom,
            },
        ))
    }

    /// Mean negative log-softmax of the target class per row.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(shape_err(
                "cross_entropy",
                format!("logits [{r}, {c}] with {} targets", targets.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|t| **t >= c) {
            return Err(Error::Contract(format!(
                "cross_entropy target {t} out of range for {c} classes"
            )));
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[targets[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let value = if r == 0 { 0.0 } else { total / r as f64 };
        Ok(self.push(
            1,
            1,
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar node. Returns gradients for every parameter
    /// reachable from `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got [{r}, {c}]"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut params: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(params.entry(*id).or_insert_with(|| vec![0.0; dy.len()]), &dy),
                Op::ParamRows(id, rows_idx, table_len) => {
                    let table = params.entry(*id).or_insert_with(|| vec![0.0; *table_len]);
                    for (k, &row) in rows_idx.iter().enumerate() {
                        for j in 0..cols {
                            table[row * cols + j] += dy[k * cols + j];
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = cols;
                    let da = matmul_nt(&dy, self.value(*b), m, n, k);
                    let db = matmul_tn(self.value(*a), &dy, m, k, n);
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            da[j * rows + i] = dy[i * cols + j];
                        }
                    }
                    add_grad(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    add_grad(&mut grads, *a, dy.clone());
                    add_grad(&mut grads, *b, dy);
                }
                Op::AddRow(a, b) => {
                    let cb = self.dims(*b).1;
                    let mut db = vec![0.0; cb];
                    for (idx, v) in dy.iter().enumerate() {
                        db[if cb == 1 { 0 } else { idx % cols }] += v;
                    }
                    add_grad(&mut grads, *a, dy);
                    add_grad(&mut grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let da = dy.iter().zip(self.value(*b)).map(|(g, v)| g * v).collect();
                    let db = dy.iter().zip(self.value(*a)).map(|(g, v)| g * v).collect();
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::Scale(a, s) => {
                    add_grad(&mut grads, *a, dy.iter().map(|g| g * s).collect());
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.dims(p).1;
                        let mut dp = Vec::with_capacity(rows * pc);
                        for i in 0..rows {
                            dp.extend_from_slice(&dy[i * cols + offset..i * cols + offset + pc]);
                        }
                        add_grad(&mut grads, p, dp);
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        add_grad(&mut grads, p, dy[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::GatherRows(a, rows_idx) => {
                    let (ar, ac) = self.dims(*a);
                    let mut da = vec![0.0; ar * ac];
                    for (k, &row) in rows_idx.iter().enumerate() {
                        for j in 0..ac {
                            da[row * ac + j] += dy[k * ac + j];
                        }
                    }
                    add_grad(&mut grads, *a, da);
                }
                Op::GatherElems(a, flat) => {
                    let mut da = vec![0.0; self.value(*a).len()];
                    for (k, &i) in flat.iter().enumerate() {
                        da[i] += dy[k];
                    }
                    add_grad(&mut grads, *a, da);
                }
                Op::SliceCols(a, start) => {
                    let (ar, ac) = self.dims(*a);
                    let mut da = vec![0.0; ar * ac];
                    for i in 0..ar {
                        da[i * ac + start..i * ac + start + cols]
                            .copy_from_slice(&dy[i * cols..(i + 1) * cols]);
                    }
                    add_grad(&mut grads, *a, da);
                }
                Op::GroupMean(a, groups) => {
                    let (ar, ac) = self.dims(*a);
                    let mut da = vec![0.0; ar * ac];
                    for (g, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / members.len() as f64;
                        for &i in members {
                            for j in 0..ac {
                                da[i * ac + j] += dy[g * ac + j] * inv;
                            }
                        }
                    }
                    add_grad(&mut grads, *a, da);
                }
                Op::RowDot(a, b) => {
                    let ac = self.dims(*a).1;
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = vec![0.0; av.len()];
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..rows {
                        for j in 0..ac {
                            da[i * ac + j] = dy[i] * bv[i * ac + j];
                            db[i * ac + j] = dy[i] * av[i * ac + j];
                        }
                    }
                    add_grad(&mut grads, *a, da);
                    add_grad(&mut grads, *b, db);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let g = self.value(*gamma);
                    let mut dx = vec![0.0; rows * cols];
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    let n = cols as f64;
                    for i in 0..rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..cols {
                            let d = dy[i * cols + j];
                            let h = xhat[i * cols + j];
                            dg[j] += d * h;
                            db[j] += d;
                            let dh = d * g[j];
                            sum_d += dh;
                            sum_dx += dh * h;
                        }
                        for j in 0..cols {
                            let dh = dy[i * cols + j] * g[j];
                            let h = xhat[i * cols + j];
                            dx[i * cols + j] = inv_std[i] / n * (n * dh - sum_d - h * sum_dx);
                        }
                    }
                    add_grad(&mut grads, *x, dx);
                    add_grad(&mut grads, *gamma, dg);
                    add_grad(&mut grads, *beta, db);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let dot: f64 = (0..cols).map(|j| dy[i * cols + j] * y[i * cols + j]).sum();
                        for j in 0..cols {
                            da[i * cols + j] = y[i * cols + j] * (dy[i * cols + j] - dot);
                        }
                    }
                    add_grad(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = dy.iter().zip(&node.value).map(|(g, s)| g * s * (1.0 - s)).collect();
                    add_grad(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = dy
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_grad(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let da = dy
                        .iter()
                        .zip(self.value(*a))
                        .map(|(g, &x)| {
                            let u = GELU_C * (x + 0.044715 * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    add_grad(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = dy.iter().zip(&node.value).map(|(g, t)| g * (1.0 - t * t)).collect();
                    add_grad(&mut grads, *a, da);
                }
                Op::Dropout(a, mask) => {
                    let da = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                    add_grad(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    add_grad(&mut grads, *a, vec![dy[0]; n]);
                }
                Op::Bce {
                    logits,
                    targets,
                    mask,
                    denom,
                } => {
                    if *denom > 0.0 {
                        let da = self
                            .value(*logits)
                            .iter()
                            .zip(targets)
                            .zip(mask)
                            .map(|((&z, &y), &m)| dy[0] * m * (sigmoid(z) - y) / denom)
                            .collect();
                        add_grad(&mut grads, *logits, da);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let (lr, lc) = self.dims(*logits);
                    if lr > 0 {
                        let inv = dy[0] / lr as f64;
                        let mut da: Vec<f64> = probs.iter().map(|p| p * inv).collect();
                        for (i, &t) in targets.iter().enumerate() {
                            da[i * lc + t] -= inv;
                        }
                        add_grad(&mut grads, *logits, da);
                    }
                }
            }
        }

        Ok(Gradients { map: params })
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bce_term(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn accumulate(acc: &mut [f64], g: &[f64]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

fn add_grad(grads: &mut [Option<Vec<f64>>], node: NodeId, g: Vec<f64>) {
    match &mut grads[node.0] {
        Some(acc) => accumulate(acc, &g),
        slot @ None => *slot = Some(g),
    }
}
