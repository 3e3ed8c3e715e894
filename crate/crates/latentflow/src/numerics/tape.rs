//! Reverse-mode gradient tape.
//!
//! Records the primitive ops the crate's networks need (matmul, adds,
//! elementwise nonlinearities, reductions, concat/slice, gather, grouped
//! pooling) and replays them in exact reverse order to accumulate
//! gradients. Nodes live in an append-only arena, so every input id is
//! strictly smaller than its consumer's id and cycles are impossible by
//! construction.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::numerics::array::{matmul, matmul_nt, matmul_tn, DenseArray};
use crate::numerics::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant or input leaf. Leaves that mirror stored parameters are
    /// tracked separately in `Tape::param_leaves` so backward can report
    /// per-parameter gradients.
    Leaf,
    MatMul(NodeId, NodeId),
    /// Elementwise sum of two same-shape arrays.
    Add(NodeId, NodeId),
    /// Row-broadcast bias: [m,n] + [n].
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// y = a*x + b applied elementwise.
    Affine { x: NodeId, a: f64 },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    /// Hard clamp; gradient is zero outside [lo, hi].
    Clamp { x: NodeId, lo: f64, hi: f64 },
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Contiguous row slice of a 2-D array.
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    /// Row gather: out[i] = x[idx[i]].
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// Max over each consecutive group of `group` rows; ties keep the first.
    GroupMax { x: NodeId, group: usize },
    /// Mean over each consecutive group of `group` rows.
    GroupMean { x: NodeId, group: usize },
    /// Per-row scalar product: [m,n] scaled by column vector [m,1].
    MulRowScalars { x: NodeId, s: NodeId },
    /// Identity forward, zero backward.
    Detach(NodeId),
    /// Shape reinterpretation; same buffer.
    Reshape { x: NodeId },
}

struct Node {
    value: DenseArray,
    op: Op,
}

/// Recording tape. Build the forward pass through its methods, then call
/// [`Tape::backward`] on a scalar loss node.
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<(ParamId, NodeId)>,
    /// Forward evaluations counted for the one-step generation contract.
    eval_counter: Cell<u64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            eval_counter: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    pub fn bump_eval_counter(&self) {
        self.eval_counter.set(self.eval_counter.get() + 1);
    }

    pub fn eval_count(&self) -> u64 {
        self.eval_counter.get()
    }

    fn push(&mut self, value: DenseArray, op: Op) -> NodeId {
        if let Some(max_in) = op_inputs(&op).iter().map(|n| n.0).max() {
            assert!(max_in < self.nodes.len(), "tape input from the future");
        }
        debug_assert!(value.is_finite(), "non-finite value on tape");
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: DenseArray) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.leaf(DenseArray::scalar(value))
    }

    /// Insert a stored parameter as a leaf. Its gradient is retrievable from
    /// the result of [`Tape::backward`] under the same id.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.push(store.value(id).clone(), Op::Leaf);
        self.param_leaves.push((id, node));
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "add shape {:?} vs {:?}", va.shape(), vb.shape());
        let values = va.values().iter().zip(vb.values()).map(|(x, y)| x + y).collect();
        let value = DenseArray::new(va.shape().to_vec(), values);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.cols();
        assert_eq!(vb.numel(), n, "bias width {} vs {}", vb.numel(), n);
        let mut values = vx.values().to_vec();
        for row in values.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(vb.values()) {
                *v += b;
            }
        }
        let value = DenseArray::new(vx.shape().to_vec(), values);
        self.push(value, Op::AddBias(x, bias))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "sub shape {:?} vs {:?}", va.shape(), vb.shape());
        let values = va.values().iter().zip(vb.values()).map(|(x, y)| x - y).collect();
        let value = DenseArray::new(va.shape().to_vec(), values);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "mul shape {:?} vs {:?}", va.shape(), vb.shape());
        let values = va.values().iter().zip(vb.values()).map(|(x, y)| x * y).collect();
        let value = DenseArray::new(va.shape().to_vec(), values);
        self.push(value, Op::Mul(a, b))
    }

    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let vx = self.value(x);
        let values = vx.values().iter().map(|v| a * v + b).collect();
        let value = DenseArray::new(vx.shape().to_vec(), values);
        self.push(value, Op::Affine { x, a })
    }

    pub fn scale(&mut self, x: NodeId, a: f64) -> NodeId {
        self.affine(x, a, 0.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let values = vx.values().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let value = DenseArray::new(vx.shape().to_vec(), values);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let values = vx.values().iter().map(|v| v.tanh()).collect();
        let value = DenseArray::new(vx.shape().to_vec(), values);
        self.push(value, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let values = vx.values().iter().map(|v| v.exp()).collect();
        let value = DenseArray::new(vx.shape().to_vec(), values);
        self.push(value, Op::Exp(x))
    }

    /// Smooth gated nonlinearity x * sigmoid(x).
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let vx = self.value(x);
        let values = vx.values().iter().map(|v| v.clamp(lo, hi)).collect();
        let value = DenseArray::new(vx.shape().to_vec(), values);
        self.push(value, Op::Clamp { x, lo, hi })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).values().iter().sum();
        self.push(DenseArray::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let s: f64 = vx.values().iter().sum();
        let m = s / vx.numel() as f64;
        self.push(DenseArray::scalar(m), Op::MeanAll(x))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        let cols = vx.cols();
        assert!(start + len <= vx.rows(), "row slice out of range");
        let values = vx.values()[start * cols..(start + len) * cols].to_vec();
        let value = DenseArray::matrix(len, cols, values);
        self.push(value, Op::SliceRows { x, start, len })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        assert!(start + len <= cols, "col slice out of range");
        let mut values = Vec::with_capacity(rows * len);
        for r in 0..rows {
            values.extend_from_slice(&vx.values()[r * cols + start..r * cols + start + len]);
        }
        let value = DenseArray::matrix(rows, len, values);
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let vp = self.value(p);
                assert_eq!(vp.rows(), rows, "concat_cols row mismatch");
                values.extend_from_slice(vp.row(r));
            }
        }
        let value = DenseArray::matrix(rows, total, values);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut values = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            values.extend_from_slice(vx.row(i));
        }
        let value = DenseArray::matrix(idx.len(), cols, values);
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn group_max(&mut self, x: NodeId, group: usize) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        assert!(group > 0 && rows % group == 0, "group_max: {rows} rows / {group}");
        let out_rows = rows / group;
        let mut values = vec![f64::NEG_INFINITY; out_rows * cols];
        for r in 0..rows {
            let g = r / group;
            for c in 0..cols {
                let v = vx.values()[r * cols + c];
                if v > values[g * cols + c] {
                    values[g * cols + c] = v;
                }
            }
        }
        let value = DenseArray::matrix(out_rows, cols, values);
        self.push(value, Op::GroupMax { x, group })
    }

    pub fn group_mean(&mut self, x: NodeId, group: usize) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        assert!(group > 0 && rows % group == 0, "group_mean: {rows} rows / {group}");
        let out_rows = rows / group;
        let mut values = vec![0.0; out_rows * cols];
        for r in 0..rows {
            let g = r / group;
            for c in 0..cols {
                values[g * cols + c] += vx.values()[r * cols + c];
            }
        }
        for v in values.iter_mut() {
            *v /= group as f64;
        }
        let value = DenseArray::matrix(out_rows, cols, values);
        self.push(value, Op::GroupMean { x, group })
    }

    /// Mean over all rows: [m,n] -> [1,n].
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let rows = self.value(x).rows();
        self.group_mean(x, rows)
    }

    pub fn mul_row_scalars(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (vx, vs) = (self.value(x), self.value(s));
        let (rows, cols) = (vx.rows(), vx.cols());
        assert_eq!(vs.numel(), rows, "row scalars {} vs rows {}", vs.numel(), rows);
        let mut values = vx.values().to_vec();
        for (r, chunk) in values.chunks_mut(cols).enumerate() {
            let f = vs.values()[r];
            for v in chunk.iter_mut() {
                *v *= f;
            }
        }
        let value = DenseArray::matrix(rows, cols, values);
        self.push(value, Op::MulRowScalars { x, s })
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::Detach(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let value = self.value(x).reshaped(shape.clone());
        self.push(value, Op::Reshape { x })
    }

    /// Reverse sweep from a scalar loss. Returns per-parameter gradients for
    /// every parameter leaf on the tape; parameters that do not influence the
    /// loss get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        lv.check_finite("loss")?;

        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseArray::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = Gradients::default();
        for &(pid, node) in &self.param_leaves {
            let g = grads[node.0]
                .clone()
                .unwrap_or_else(|| DenseArray::zeros(self.value(node).shape()));
            out.insert(pid, g);
        }
        Ok(out)
    }

    /// Gradient of the loss w.r.t. an arbitrary leaf (used by probes that
    /// differentiate inputs rather than parameters).
    pub fn backward_wrt(&self, loss: NodeId, leaf: NodeId) -> Result<DenseArray> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::InvalidArgument("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseArray::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(grads[leaf.0]
            .clone()
            .unwrap_or_else(|| DenseArray::zeros(self.value(leaf).shape())))
    }

    fn accumulate(&self, id: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = matmul_nt(g, self.value(*b));
                let gb = matmul_tn(self.value(*a), g);
                add_into(grads, *a, ga);
                add_into(grads, *b, gb);
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.clone());
            }
            Op::AddBias(x, bias) => {
                add_into(grads, *x, g.clone());
                let n = self.value(*bias).numel();
                let mut gb = vec![0.0; n];
                for row in g.values().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                add_into(
                    grads,
                    *bias,
                    DenseArray::new(self.value(*bias).shape().to_vec(), gb),
                );
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g.clone());
                let gb = g.values().iter().map(|v| -v).collect();
                add_into(grads, *b, DenseArray::new(g.shape().to_vec(), gb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = g.values().iter().zip(vb.values()).map(|(x, y)| x * y).collect();
                let gb = g.values().iter().zip(va.values()).map(|(x, y)| x * y).collect();
                add_into(grads, *a, DenseArray::new(g.shape().to_vec(), ga));
                add_into(grads, *b, DenseArray::new(g.shape().to_vec(), gb));
            }
            Op::Affine { x, a } => {
                let gx = g.values().iter().map(|v| a * v).collect();
                add_into(grads, *x, DenseArray::new(g.shape().to_vec(), gx));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = g
                    .values()
                    .iter()
                    .zip(y.values())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                add_into(grads, *x, DenseArray::new(g.shape().to_vec(), gx));
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let gx = g
                    .values()
                    .iter()
                    .zip(y.values())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                add_into(grads, *x, DenseArray::new(g.shape().to_vec(), gx));
            }
            Op::Exp(x) => {
                let y = &node.value;
                let gx = g.values().iter().zip(y.values()).map(|(gv, yv)| gv * yv).collect();
                add_into(grads, *x, DenseArray::new(g.shape().to_vec(), gx));
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x);
                let gx = g
                    .values()
                    .iter()
                    .zip(vx.values())
                    .map(|(gv, xv)| if *xv >= *lo && *xv <= *hi { *gv } else { 0.0 })
                    .collect();
                add_into(grads, *x, DenseArray::new(g.shape().to_vec(), gx));
            }
            Op::SumAll(x) => {
                let s = g.item();
                add_into(grads, *x, DenseArray::full(self.value(*x).shape(), s));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                let s = g.item() / n;
                add_into(grads, *x, DenseArray::full(self.value(*x).shape(), s));
            }
            Op::SliceRows { x, start, len } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let mut gx = DenseArray::zeros(vx.shape());
                gx.values_mut()[start * cols..(start + len) * cols].copy_from_slice(g.values());
                add_into(grads, *x, gx);
            }
            Op::SliceCols { x, start, len } => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.rows(), vx.cols());
                let mut gx = DenseArray::zeros(vx.shape());
                for r in 0..rows {
                    gx.values_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.values()[r * len..(r + 1) * len]);
                }
                add_into(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut gp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.values()[r * total + offset..r * total + offset + pc]);
                    }
                    add_into(grads, p, DenseArray::matrix(rows, pc, gp));
                    offset += pc;
                }
            }
            Op::GatherRows { x, idx } => {
                let vx = self.value(*x);
                let cols = vx.cols();
                let mut gx = DenseArray::zeros(vx.shape());
                for (out_r, &src_r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx.values_mut()[src_r * cols + c] += g.values()[out_r * cols + c];
                    }
                }
                add_into(grads, *x, gx);
            }
            Op::GroupMax { x, group } => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.rows(), vx.cols());
                let mut gx = DenseArray::zeros(vx.shape());
                for g_idx in 0..rows / group {
                    for c in 0..cols {
                        // Route to the first row attaining the max.
                        let mut best_r = g_idx * group;
                        let mut best = vx.values()[best_r * cols + c];
                        for r in g_idx * group + 1..(g_idx + 1) * group {
                            let v = vx.values()[r * cols + c];
                            if v > best {
                                best = v;
                                best_r = r;
                            }
                        }
                        gx.values_mut()[best_r * cols + c] += g.values()[g_idx * cols + c];
                    }
                }
                add_into(grads, *x, gx);
            }
            Op::GroupMean { x, group } => {
                let vx = self.value(*x);
                let (rows, cols) = (vx.rows(), vx.cols());
                let inv = 1.0 / *group as f64;
                let mut gx = DenseArray::zeros(vx.shape());
                for r in 0..rows {
                    let g_idx = r / group;
                    for c in 0..cols {
                        gx.values_mut()[r * cols + c] = g.values()[g_idx * cols + c] * inv;
                    }
                }
                add_into(grads, *x, gx);
            }
            Op::MulRowScalars { x, s } => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let (rows, cols) = (vx.rows(), vx.cols());
                let mut gx = vec![0.0; rows * cols];
                let mut gs = vec![0.0; rows];
                for r in 0..rows {
                    let f = vs.values()[r];
                    for c in 0..cols {
                        let gv = g.values()[r * cols + c];
                        gx[r * cols + c] = gv * f;
                        gs[r] += gv * vx.values()[r * cols + c];
                    }
                }
                add_into(grads, *x, DenseArray::matrix(rows, cols, gx));
                add_into(grads, *s, DenseArray::new(vs.shape().to_vec(), gs));
            }
            Op::Detach(_) => {}
            Op::Reshape { x } => {
                let gx = DenseArray::new(self.value(*x).shape().to_vec(), g.values().to_vec());
                add_into(grads, *x, gx);
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::Affine { x, .. }
        | Op::Sigmoid(x)
        | Op::Tanh(x)
        | Op::Exp(x)
        | Op::Clamp { x, .. }
        | Op::SumAll(x)
        | Op::MeanAll(x)
        | Op::SliceRows { x, .. }
        | Op::SliceCols { x, .. }
        | Op::GatherRows { x, .. }
        | Op::GroupMax { x, .. }
        | Op::GroupMean { x, .. }
        | Op::Detach(x)
        | Op::Reshape { x } => vec![*x],
        Op::ConcatCols(parts) => parts.clone(),
        Op::MulRowScalars { x, s } => vec![*x, *s],
    }
}

fn add_into(grads: &mut [Option<DenseArray>], id: NodeId, g: DenseArray) {
    match &mut grads[id.0] {
        Some(acc) => {
            debug_assert!(acc.same_shape(&g));
            for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Per-parameter gradients keyed by [`ParamId`].
#[derive(Debug, Default)]
pub struct Gradients {
    entries: Vec<Option<DenseArray>>,
}

impl Gradients {
    fn insert(&mut self, id: ParamId, g: DenseArray) {
        let idx = id.index();
        if self.entries.len() <= idx {
            self.entries.resize(idx + 1, None);
        }
        match &mut self.entries[idx] {
            Some(acc) => {
                for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&DenseArray> {
        self.entries.get(id.index()).and_then(|e| e.as_ref())
    }

    /// Global L2 norm across a parameter subset.
    pub fn global_norm(&self, ids: &[ParamId]) -> f64 {
        let mut sq = 0.0;
        for id in ids {
            if let Some(g) = self.get(*id) {
                sq += g.values().iter().map(|v| v * v).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    /// Scale every gradient so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, ids: &[ParamId], max_norm: f64) -> f64 {
        let norm = self.global_norm(ids);
        if norm > max_norm && norm > 0.0 {
            let f = max_norm / norm;
            for id in ids {
                if let Some(g) = self.entries[id.index()].as_mut() {
                    for v in g.values_mut() {
                        *v *= f;
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamStore;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn square_gradient_matches_analytic() {
        // f(x) = x*x at x=3 -> df/dx = 6
        let mut store = ParamStore::new();
        let x = store.register("x", DenseArray::scalar(3.0));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let y = tape.mul(xn, xn);
        let grads = tape.backward(y).unwrap();
        assert!(approx(grads.get(x).unwrap().item(), 6.0, 1e-12));
    }

    #[test]
    fn matmul_sum_gradient_is_column_sums() {
        // f(x) = sum(W x), W = [[1,2],[3,4]], x = [1,1] -> df/dx = [4,6]
        let mut store = ParamStore::new();
        let x = store.register("x", DenseArray::matrix(2, 1, vec![1.0, 1.0]));
        let mut tape = Tape::new();
        let w = tape.leaf(DenseArray::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let xn = tape.param(&store, x);
        let wx = tape.matmul(w, xn);
        let loss = tape.sum_all(wx);
        let grads = tape.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert!(approx(gx.values()[0], 4.0, 1e-12));
        assert!(approx(gx.values()[1], 6.0, 1e-12));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.register("used", DenseArray::scalar(2.0));
        let unused = store.register("unused", DenseArray::from_vec(vec![1.0, 2.0, 3.0]));
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _n = tape.param(&store, unused);
        let loss = tape.mul(u, u);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseArray::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn detach_stops_gradient() {
        let mut store = ParamStore::new();
        let x = store.register("x", DenseArray::scalar(3.0));
        let mut tape = Tape::new();
        let xn = tape.param(&store, x);
        let d = tape.detach(xn);
        let y = tape.mul(xn, d); // y = x * stopgrad(x): dy/dx = stopgrad(x) = 3
        let grads = tape.backward(y).unwrap();
        assert!(approx(grads.get(x).unwrap().item(), 3.0, 1e-12));
    }

    /// Central finite differences over every element of every registered
    /// parameter. The closure rebuilds the forward pass from the store.
    fn finite_diff_check<F>(store: &mut ParamStore, ids: &[ParamId], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &ParamStore) -> NodeId,
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        for &id in ids {
            let n = store.value(id).numel();
            for i in 0..n {
                let orig = store.value(id).values()[i];
                store.value_mut(id).values_mut()[i] = orig + h;
                let mut tp = Tape::new();
                let lp = build(&mut tp, store);
                let fp = tp.value(lp).item();
                store.value_mut(id).values_mut()[i] = orig - h;
                let mut tm = Tape::new();
                let lm = build(&mut tm, store);
                let fm = tm.value(lm).item();
                store.value_mut(id).values_mut()[i] = orig;

                let fd = (fp - fm) / (2.0 * h);
                let ad = grads.get(id).unwrap().values()[i];
                let denom = ad.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (ad - fd).abs() / denom < tol,
                    "param {:?}[{}]: ad={} fd={}",
                    id,
                    i,
                    ad,
                    fd
                );
            }
        }
    }

    #[test]
    fn every_primitive_passes_finite_difference() {
        use rand::Rng;
        let mut rng = crate::numerics::rng::RngStreams::new(11).stream("tape-fd");
        let mut store = ParamStore::new();
        let a = store.register(
            "a",
            DenseArray::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        );
        let b = store.register(
            "b",
            DenseArray::matrix(4, 2, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        );
        let bias = store.register(
            "bias",
            DenseArray::from_vec((0..2).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        );
        let s = store.register(
            "s",
            DenseArray::matrix(3, 1, (0..3).map(|_| rng.gen_range(0.5..1.5)).collect()),
        );

        let build = |tape: &mut Tape, store: &ParamStore| {
            let an = tape.param(store, a);
            let bn = tape.param(store, b);
            let biasn = tape.param(store, bias);
            let sn = tape.param(store, s);
            let mm = tape.matmul(an, bn); // [3,2]
            let mb = tape.add_bias(mm, biasn);
            let sg = tape.sigmoid(mb);
            let th = tape.tanh(mb);
            let su = tape.add(sg, th);
            let sc = tape.mul_row_scalars(su, sn);
            let cat = tape.concat_cols(&[sc, sg]); // [3,4]
            let left = tape.slice_cols(cat, 0, 2);
            let top = tape.slice_rows(left, 0, 2);
            let gathered = tape.gather_rows(cat, &[0, 0, 1, 2]); // [4,4]
            let gmax = tape.group_max(gathered, 2); // [2,4]
            let gmean = tape.group_mean(gathered, 2); // [2,4]
            let pooled = tape.add(gmax, gmean);
            let e = tape.affine(top, 0.3, -0.1);
            let ex = tape.exp(e);
            let cl = tape.clamp(ex, 0.2, 2.5);
            let si = tape.silu(cl);
            let p1 = tape.mean_all(si);
            let p2 = tape.mean_all(pooled);
            let d = tape.sub(p1, p2);
            let sq = tape.mul(d, d);
            let msum = tape.sum_all(pooled);
            let term = tape.affine(msum, 0.05, 0.0);
            tape.add(sq, term)
        };
        finite_diff_check(&mut store, &[a, b, bias, s], build, 1e-4);
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        use rand::Rng;
        let mut rng = crate::numerics::rng::RngStreams::new(5).stream("mlp-fd");
        let mut store = ParamStore::new();
        let w1 = store.register(
            "w1",
            DenseArray::matrix(2, 3, (0..6).map(|_| rng.gen_range(-0.8..0.8)).collect()),
        );
        let b1 = store.register("b1", DenseArray::from_vec(vec![0.1, -0.2, 0.05]));
        let w2 = store.register(
            "w2",
            DenseArray::matrix(3, 2, (0..6).map(|_| rng.gen_range(-0.8..0.8)).collect()),
        );
        let b2 = store.register("b2", DenseArray::from_vec(vec![0.0, 0.3]));
        let w3 = store.register("w3", DenseArray::matrix(2, 1, vec![0.7, -0.4]));
        let input: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let build = move |tape: &mut Tape, store: &ParamStore| {
            let x = tape.leaf(DenseArray::matrix(4, 2, input.clone()));
            let w1n = tape.param(store, w1);
            let b1n = tape.param(store, b1);
            let w2n = tape.param(store, w2);
            let b2n = tape.param(store, b2);
            let w3n = tape.param(store, w3);
            let h1 = tape.matmul(x, w1n);
            let h1 = tape.add_bias(h1, b1n);
            let h1 = tape.tanh(h1);
            let h2 = tape.matmul(h1, w2n);
            let h2 = tape.add_bias(h2, b2n);
            let h2 = tape.sigmoid(h2);
            let out = tape.matmul(h2, w3n);
            let sq = tape.mul(out, out);
            tape.mean_all(sq)
        };
        finite_diff_check(&mut store, &[w1, b1, w2, b2, w3], build, 1e-4);
    }
}
