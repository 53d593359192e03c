//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A `Tape` owns every intermediate tensor of one forward pass. Ops are
//! appended in execution order and replayed in reverse by [`Tape::backward`],
//! which pushes gradients into the [`ParameterStore`] leaves. A tape is
//! built, differentiated, and dropped; parameters persist in the store.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::store::ParameterStore;
use crate::numerics::tensor::{mm_nn, mm_nt, mm_tn, Tensor};

/// Floor applied inside [`Tape::log_clamped`] so log never sees zero.
pub const LOG_CLAMP: f64 = 1e-12;

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Input with no gradient flow out of the tape.
    Constant,
    /// Leaf backed by a store parameter; grads are flushed there.
    Param(String),
    Matmul(NodeId, NodeId),
    /// C = A * B^T.
    MatmulNT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    /// Mask entries are 0 or 1/(1-p); identity in eval mode is not recorded.
    Dropout { x: NodeId, mask: Vec<f64> },
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    RepeatRows(NodeId),
    MeanRows(NodeId),
    /// Row `index` of an embedding table, as a 1xD tensor.
    EmbedRow { table: NodeId, index: usize },
    /// Single entry as a 1x1 tensor.
    Pick { x: NodeId, row: usize, col: usize },
    /// Elementwise ln(max(x, LOG_CLAMP)).
    LogClamped(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    /// Record an input that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Record a leaf for a store parameter. Memoized per tape, so a batch
    /// referencing the same weight shares one node. One tape serves one
    /// store: values are snapshotted on first use.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = store.value(name)?.clone();
        let id = self.push(value, Op::Param(name.to_string()));
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = mm_nn(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Matmul(a, b)))
    }

    /// A * B^T without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = mm_nt(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatmulNT(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn binary_shapes(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{}: operand shapes {}x{} and {}x{} differ",
                op, sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("sub", a, b)?;
        let mut value = self.value(a).clone();
        for (v, &w) in value.data_mut().iter_mut().zip(self.value(b).data().iter()) {
            *v -= w;
        }
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes("hadamard", a, b)?;
        let mut value = self.value(a).clone();
        for (v, &w) in value.data_mut().iter_mut().zip(self.value(b).data().iter()) {
            *v *= w;
        }
        Ok(self.push(value, Op::Hadamard(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.scale_in_place(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut value = self.value(a).clone();
        for v in value.data_mut() {
            *v = v.tanh();
        }
        self.push(value, Op::Tanh(a))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".to_string()));
        }
        let mut value = x.clone();
        let cols = value.cols();
        for r in 0..value.rows() {
            let row = &mut value.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Row-wise layer normalization with learned gain and bias (both 1xD).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::Dimension(format!("layer_norm needs width >= 2, got {d}")));
        }
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.value(id).shape();
            if s != (1, d) {
                return Err(Error::Dimension(format!(
                    "layer_norm {name} must be 1x{d}, got {}x{}",
                    s.0, s.1
                )));
            }
        }
        let mut value = self.value(x).clone();
        let gain_row = self.value(gain).data().to_vec();
        let bias_row = self.value(bias).data().to_vec();
        for r in 0..value.rows() {
            let row = &mut value.data_mut()[r * d..(r + 1) * d];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gain_row[i] + bias_row[i];
            }
        }
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Inverted dropout: zero with probability `p` and rescale survivors by
    /// 1/(1-p) in train mode; identity in eval mode or at p = 0.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, train: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut value = self.value(x).clone();
        for (v, &m) in value.data_mut().iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Concatenate along the last axis; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Dimension(format!(
                    "concat: row counts differ ({} vs {})",
                    rows,
                    self.value(p).rows()
                )));
            }
            cols += self.value(p).cols();
        }
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let part = self.value(p).clone();
            for r in 0..rows {
                for c in 0..part.cols() {
                    value.set(r, offset + c, part.get(r, c));
                }
            }
            offset += part.cols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns [start, start+len) of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(x);
        if start + len > src.cols() {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of range for width {}",
                start + len,
                src.cols()
            )));
        }
        let mut value = Tensor::zeros(src.rows(), len);
        for r in 0..src.rows() {
            for c in 0..len {
                value.set(r, c, src.get(r, start + c));
            }
        }
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Tile a 1xD row `times` times into a times x D matrix.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        let src = self.value(x);
        if src.rows() != 1 {
            return Err(Error::Dimension(format!(
                "repeat_rows wants a 1xN input, got {}x{}",
                src.rows(),
                src.cols()
            )));
        }
        let row = src.data().to_vec();
        let mut data = Vec::with_capacity(times * row.len());
        for _ in 0..times {
            data.extend_from_slice(&row);
        }
        let value = Tensor::from_vec(times, row.len(), data)?;
        Ok(self.push(value, Op::RepeatRows(x)))
    }

    /// Arithmetic mean over rows, a 1xD result.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let (rows, cols) = src.shape();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(src.row(r).iter()) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let value = Tensor::row_vec(&out);
        self.push(value, Op::MeanRows(x))
    }

    /// Row `index` of `table` as a 1xD tensor.
    pub fn embed_row(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        let src = self.value(table);
        if index >= src.rows() {
            return Err(Error::Contract(format!(
                "embedding index {index} out of range for table with {} rows",
                src.rows()
            )));
        }
        let value = Tensor::row_vec(src.row(index));
        Ok(self.push(value, Op::EmbedRow { table, index }))
    }

    /// Entry (row, col) as a 1x1 tensor.
    pub fn pick(&mut self, x: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let src = self.value(x);
        if row >= src.rows() || col >= src.cols() {
            return Err(Error::Contract(format!(
                "pick ({row}, {col}) out of range for {}x{}",
                src.rows(),
                src.cols()
            )));
        }
        let value = Tensor::scalar(src.get(row, col));
        Ok(self.push(value, Op::Pick { x, row, col }))
    }

    /// Elementwise ln(max(x, 1e-12)).
    pub fn log_clamped(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for v in value.data_mut() {
            *v = v.max(LOG_CLAMP).ln();
        }
        self.push(value, Op::LogClamped(x))
    }

    /// Fold a non-empty list of same-shaped nodes into their sum.
    pub fn add_all(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut acc = ids[0];
        for &id in &ids[1..] {
            acc = self.add(acc, id)?;
        }
        Ok(acc)
    }

    /// Reverse-accumulate d(loss)/d(node) for every node, then add each
    /// parameter leaf's gradient into the store. `loss` must be 1x1.
    /// Repeated calls keep accumulating in the store until it is cleared.
    pub fn backward(&self, loss: NodeId, store: &mut ParameterStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &grad, &mut grads)?;
            if let Op::Param(name) = &self.nodes[idx].op {
                store.accumulate_grad(name, &grad)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let accumulate = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Constant | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let da = mm_nt(grad, self.value(*b))?;
                let db = mm_tn(self.value(*a), grad)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatmulNT(a, b) => {
                let da = mm_nn(grad, self.value(*b))?;
                let db = mm_tn(grad, self.value(*a))?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, grad.transpose());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, grad.clone());
                let mut neg = grad.clone();
                neg.scale_in_place(-1.0);
                accumulate(grads, *b, neg);
            }
            Op::Hadamard(a, b) => {
                let mut da = grad.clone();
                for (v, &w) in da.data_mut().iter_mut().zip(self.value(*b).data().iter()) {
                    *v *= w;
                }
                let mut db = grad.clone();
                for (v, &w) in db.data_mut().iter_mut().zip(self.value(*a).data().iter()) {
                    *v *= w;
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, s) => {
                let mut da = grad.clone();
                da.scale_in_place(*s);
                accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let mut da = grad.clone();
                for (v, &yv) in da.data_mut().iter_mut().zip(y.data().iter()) {
                    *v *= yv * (1.0 - yv);
                }
                accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let mut da = grad.clone();
                for (v, &yv) in da.data_mut().iter_mut().zip(y.data().iter()) {
                    *v *= 1.0 - yv * yv;
                }
                accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let cols = y.cols();
                let mut da = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = grad.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&yv, &gv)| yv * gv).sum();
                    for c in 0..cols {
                        da.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.cols();
                let mut dx = Tensor::zeros(xv.rows(), d);
                let mut dgain = Tensor::zeros(1, d);
                let mut dbias = Tensor::zeros(1, d);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    let gr = grad.row(r);
                    // d/dgain, d/dbias accumulate across rows.
                    for c in 0..d {
                        dgain.set(0, c, dgain.get(0, c) + gr[c] * xhat[c]);
                        dbias.set(0, c, dbias.get(0, c) + gr[c]);
                    }
                    let dxhat: Vec<f64> = (0..d).map(|c| gr[c] * gv.get(0, c)).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        dx.set(r, c, inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat));
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::Dropout { x, mask } => {
                let mut dx = grad.clone();
                for (v, &m) in dx.data_mut().iter_mut().zip(mask.iter()) {
                    *v *= m;
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let rows = self.value(p).rows();
                    let mut dp = Tensor::zeros(rows, pc);
                    for r in 0..rows {
                        for c in 0..pc {
                            dp.set(r, c, grad.get(r, offset + c));
                        }
                    }
                    accumulate(grads, p, dp);
                    offset += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for r in 0..grad.rows() {
                    for c in 0..grad.cols() {
                        dx.set(r, start + c, grad.get(r, c));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::RepeatRows(x) => {
                let cols = grad.cols();
                let mut dx = Tensor::zeros(1, cols);
                for r in 0..grad.rows() {
                    for c in 0..cols {
                        dx.set(0, c, dx.get(0, c) + grad.get(r, c));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let src = self.value(*x);
                let (rows, cols) = src.shape();
                let mut dx = Tensor::zeros(rows, cols);
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for c in 0..cols {
                        dx.set(r, c, grad.get(0, c) * inv);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::EmbedRow { table, index } => {
                let src = self.value(*table);
                let mut dt = Tensor::zeros(src.rows(), src.cols());
                for c in 0..src.cols() {
                    dt.set(*index, c, grad.get(0, c));
                }
                accumulate(grads, *table, dt);
            }
            Op::Pick { x, row, col } => {
                let src = self.value(*x);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                dx.set(*row, *col, grad.get(0, 0));
                accumulate(grads, *x, dx);
            }
            Op::LogClamped(x) => {
                let xv = self.value(*x);
                let mut dx = grad.clone();
                for (v, &inp) in dx.data_mut().iter_mut().zip(xv.data().iter()) {
                    *v *= if inp > LOG_CLAMP { 1.0 / inp } else { 0.0 };
                }
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }
}

/// Mean and population variance of a slice (two-pass).
fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}
