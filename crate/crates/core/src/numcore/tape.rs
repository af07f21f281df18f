//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its value and enough context for its
//! backward rule. Leaves can borrow parameter storage, so building a forward
//! pass never copies weights. [`Tape::backward`] walks the nodes in reverse
//! record order exactly once and leaves a gradient on every node that
//! requires one.

use std::borrow::Cow;

use super::kernels::{gemm, softmax_in_place};
use super::tensor::{numel, Tensor};
use super::NumError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        bias: NodeId,
        cols: usize,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    ScaleBy {
        s: NodeId,
        x: NodeId,
    },
    ScaleRows {
        x: NodeId,
        s: NodeId,
        cols: usize,
    },
    Transpose {
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Map {
        x: NodeId,
        df: fn(f64) -> f64,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: NodeId,
        outer: usize,
        n: usize,
        inner: usize,
    },
    CausalMask {
        x: NodeId,
        n: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
        vocab: usize,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
        cols: usize,
    },
    SliceCols {
        x: NodeId,
        cols: usize,
        start: usize,
        end: usize,
    },
    ConcatCols {
        parts: Vec<(NodeId, usize)>,
        rows: usize,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    requires_grad: bool,
    op: Op,
}

/// Summary of one backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Non-leaf nodes whose backward rule ran.
    pub ops_visited: usize,
    pub leaves_reached: usize,
}

/// Ordered record of operations. Single-threaded by construction.
#[derive(Debug)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grad_enabled: bool,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> NumError {
    NumError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            grads: None,
        }
    }

    /// A tape that never tracks gradients; used for inference.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, inputs: &[NodeId], op: Op) -> NodeId {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, requires_grad: bool) -> NodeId {
        let requires_grad = self.grad_enabled && requires_grad;
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Borrows a tensor's storage as a leaf. Trainability follows the tensor.
    pub fn leaf(&mut self, t: &'a Tensor) -> NodeId {
        self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), t.requires_grad())
    }

    /// Leaves that borrow `t`'s storage.
    pub fn leaves_of(&self, t: &Tensor) -> Vec<NodeId> {
        let ptr = t.data().as_ptr();
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && matches!(&n.value, Cow::Borrowed(v) if v.as_ptr() == ptr && v.len() == t.len()))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Takes ownership of a tensor as a leaf. Trainability follows the tensor.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let rg = t.requires_grad();
        self.push_leaf(shape, Cow::Owned(t.into_data()), rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId, NumError> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(NumError::Length {
                expected,
                actual: data.len(),
            });
        }
        Ok(self.push_leaf(shape, Cow::Owned(data), false))
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), NumError> {
        let s = self.shape(id);
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(NumError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            }),
        }
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, false);
        Ok(self.push(vec![m, n], Cow::Owned(out), &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), &[a, b], Op::Add { a, b }))
    }

    /// Adds a length-`n` bias to every row of a `[..., n]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumError> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [cols] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % cols])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, Cow::Owned(out), &[x, bias], Op::AddBias { x, bias, cols }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), &[x], Op::Scale { x, c })
    }

    /// Multiplies every element of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, s: NodeId, x: NodeId) -> Result<NodeId, NumError> {
        if self.value(s).len() != 1 {
            return Err(shape_err("scale_by", self.shape(s), &[1]));
        }
        let c = self.value(s)[0];
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, Cow::Owned(out), &[s, x], Op::ScaleBy { s, x }))
    }

    /// Scales row `t` of a `T×n` tensor by `s[t]`; `s` is `T` or `T×1`.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NumError> {
        let (rows, cols) = self.dims2(x, "scale_rows")?;
        if self.value(s).len() != rows {
            return Err(shape_err("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / cols])
            .collect();
        Ok(self.push(vec![rows, cols], Cow::Owned(out), &[x, s], Op::ScaleRows { x, s, cols }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let v = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], Cow::Owned(out), &[x], Op::Transpose { x, rows, cols }))
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, x: NodeId, f: fn(f64) -> f64, df: fn(f64) -> f64) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), &[x], Op::Map { x, df })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.map(x, super::kernels::gelu, super::kernels::gelu_grad)
    }

    /// Normalises each row over the last dimension, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId, NumError> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [cols] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.shape(bias) != [cols] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(bias)));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let rows = xv.len() / cols.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Cow::Owned(out),
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, NumError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumError::Rank {
                op: "softmax",
                expected: axis + 1,
                shape,
            });
        }
        let n = shape[axis];
        if n == 0 {
            return Err(NumError::Contract("softmax over an empty axis".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for r in 0..inner {
                for j in 0..n {
                    buf[j] = xv[(o * n + j) * inner + r];
                }
                softmax_in_place(&mut buf);
                for j in 0..n {
                    out[(o * n + j) * inner + r] = buf[j];
                }
            }
        }
        Ok(self.push(shape, Cow::Owned(out), &[x], Op::Softmax { x, outer, n, inner }))
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, x: NodeId) -> Result<NodeId, NumError> {
        let (rows, cols) = self.dims2(x, "causal_mask")?;
        if rows != cols {
            return Err(shape_err("causal_mask", &[rows], &[cols]));
        }
        let n = rows;
        let mut out = self.value(x).to_vec();
        for i in 0..n {
            for j in i + 1..n {
                out[i * n + j] = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(vec![n, n], Cow::Owned(out), &[x], Op::CausalMask { x, n }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, NumError> {
        let (rows, vocab) = self.dims2(logits, "cross_entropy")?;
        if rows != targets.len() {
            return Err(shape_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if rows == 0 {
            return Err(NumError::Contract("cross_entropy over zero positions".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(NumError::Index { index: bad, bound: vocab });
        }
        let lv = self.value(logits);
        let mut probs = lv.to_vec();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * vocab..(r + 1) * vocab];
            total += super::kernels::log_sum_exp(row) - row[t];
            softmax_in_place(&mut probs[r * vocab..(r + 1) * vocab]);
        }
        let loss = total / rows as f64;
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                vocab,
            },
        ))
    }

    /// Row lookup into a `V×d` table.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumError> {
        let (vocab, cols) = self.dims2(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumError::Index { index: bad, bound: vocab });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(
            vec![ids.len(), cols],
            Cow::Owned(out),
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
                cols,
            },
        ))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, NumError> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if start > end || end > cols {
            return Err(shape_err("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + end]);
        }
        Ok(self.push(vec![rows, w], Cow::Owned(out), &[x], Op::SliceCols { x, cols, start, end }))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumError> {
        let first = *parts
            .first()
            .ok_or_else(|| NumError::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p, c));
        }
        let total: usize = widths.iter().map(|(_, c)| c).sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for &(p, c) in &widths {
            let pv = self.value(p);
            for r in 0..rows {
                out[r * total + offset..r * total + offset + c].copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        Ok(self.push(vec![rows, total], Cow::Owned(out), parts, Op::ConcatCols { parts: widths, rows }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().sum::<f64>();
        self.push(vec![1], Cow::Owned(vec![s]), &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![1], Cow::Owned(vec![s]), &[x], Op::Mean { x })
    }

    /// Gradient of the last backward sweep for `id`, if it required one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.as_ref()?.get(id.0)?.as_deref()
    }

    /// Adds the gradient held for `id` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, id: NodeId, t: &mut Tensor) -> Result<(), NumError> {
        match self.grad(id) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    /// Discards gradients so the tape can be differentiated again.
    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Propagates gradients from the scalar `loss` to every trainable ancestor.
    pub fn backward(&mut self, loss: NodeId) -> Result<BackwardStats, NumError> {
        if self.grads.is_some() {
            return Err(NumError::Contract(
                "backward already ran on this tape; reset gradients first".into(),
            ));
        }
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Err(NumError::Contract(
                "loss does not depend on any trainable tensor".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut stats = BackwardStats {
            ops_visited: 0,
            leaves_reached: 0,
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                stats.leaves_reached += 1;
            } else {
                stats.ops_visited += 1;
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(stats)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = self.slot(grads, a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, (n, 1), self.value(b), (1, n), da, true);
                }
                if let Some(db) = self.slot(grads, b) {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, self.value(a), (1, k), g, (n, 1), db, true);
                }
            }
            &Op::Add { a, b } => {
                for id in [a, b] {
                    if let Some(d) = self.slot(grads, id) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::AddBias { x, bias, cols } => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.slot(grads, bias) {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % cols] += gv;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = self.slot(grads, a) {
                    let bv = self.value(b);
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if let Some(db) = self.slot(grads, b) {
                    let av = self.value(a);
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            &Op::ScaleBy { s, x } => {
                let c = self.value(s)[0];
                if let Some(ds) = self.slot(grads, s) {
                    ds[0] += g.iter().zip(self.value(x)).map(|(g, v)| g * v).sum::<f64>();
                }
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
                }
            }
            &Op::ScaleRows { x, s, cols } => {
                if let Some(ds) = self.slot(grads, s) {
                    let xv = self.value(x);
                    for (j, gv) in g.iter().enumerate() {
                        ds[j / cols] += gv * xv[j];
                    }
                }
                if let Some(dx) = self.slot(grads, x) {
                    let sv = self.value(s);
                    for (j, gv) in g.iter().enumerate() {
                        dx[j] += gv * sv[j / cols];
                    }
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if let Some(dx) = self.slot(grads, x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            &Op::Map { x, df } => {
                if let Some(dx) = self.slot(grads, x) {
                    let xv = self.value(x);
                    for j in 0..g.len() {
                        dx[j] += g[j] * df(xv[j]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gv = self.value(*gain);
                if let Some(dg) = self.slot(grads, *gain) {
                    for (j, gr) in g.iter().enumerate() {
                        dg[j % cols] += gr * xhat[j];
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for (j, gr) in g.iter().enumerate() {
                        db[j % cols] += gr;
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; cols];
                    for (r, rs) in rstd.iter().enumerate() {
                        let base = r * cols;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dxhat[c] = g[base + c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[base + c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            dx[base + c] += rs * (dxhat[c] - mean_d - xhat[base + c] * mean_dx);
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                if let Some(dx) = self.slot(grads, x) {
                    let y = &self.nodes[i].value;
                    for o in 0..outer {
                        for r in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + r;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::CausalMask { x, n } => {
                if let Some(dx) = self.slot(grads, x) {
                    for r in 0..n {
                        for c in 0..=r {
                            dx[r * n + c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                vocab,
            } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    let scale = g[0] / targets.len() as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..*vocab {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dl[r * vocab + c] += scale * (probs[r * vocab + c] - onehot);
                        }
                    }
                }
            }
            Op::Gather { table, ids, cols } => {
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..*cols {
                            dt[id * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            &Op::SliceCols { x, cols, start, end } => {
                if let Some(dx) = self.slot(grads, x) {
                    let w = end - start;
                    let rows = g.len() / w.max(1);
                    for r in 0..rows {
                        for c in 0..w {
                            dx[r * cols + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    if let Some(dp) = self.slot(grads, p) {
                        for r in 0..*rows {
                            for j in 0..c {
                                dp[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            &Op::Sum { x } => {
                if let Some(dx) = self.slot(grads, x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean { x } => {
                if let Some(dx) = self.slot(grads, x) {
                    let n = dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
        }
    }
}
