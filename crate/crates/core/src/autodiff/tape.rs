//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each op appends one node
//! holding its output value and the references it needs for its backward
//! rule, so nodes are always in topological order. [`Tape::backward`] walks
//! the nodes once in reverse.

use super::kernels;
use super::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Smallest argument `log` will see; larger inputs pass through unchanged.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MulBias(Var, Var),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Concat(Vec<Var>),
    SliceLast(Var, usize, usize),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    RowMax(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    WhereRows(Vec<bool>, Var, Var),
    BatchedScores(Var, Var),
    BatchedContext(Var, Var),
    HeadScores(Var, Var, usize, f64),
    HeadApply(Var, Var, usize),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation over the parameters of one [`ParamStore`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    track_params: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    /// Adds parameter gradients into the `grad` buffers of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        _ => {
            let cols = shape[shape.len() - 1];
            let rows = shape[..shape.len() - 1].iter().product();
            (rows, cols)
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl<'p> Tape<'p> {
    /// A tape that records gradients for every parameter with `requires_grad`.
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// A tape that never requires gradients; used for evaluation.
    pub fn inference(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn tensor(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tensor(v)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.tensor(v).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.tensor(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        check_finite(op_name, &data)?;
        let requires_grad = match &op {
            Op::Leaf | Op::Param(_) => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b)
            | Op::MulBias(a, b)
            | Op::MatMul(a, b)
            | Op::WhereRows(_, a, b)
            | Op::BatchedScores(a, b)
            | Op::BatchedContext(a, b)
            | Op::HeadScores(a, b, _, _)
            | Op::HeadApply(a, b, _) => self.rg(*a) || self.rg(*b),
            Op::Concat(xs) => xs.iter().any(|x| self.rg(*x)),
            Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SliceLast(a, _, _)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::Embedding(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumLast(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a, _)
            | Op::RowMax(a, _)
            | Op::CrossEntropy(a, _, _) => self.rg(*a),
        };
        let tensor = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value: Value::Owned(tensor),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        let shape = tensor.shape().to_vec();
        let data = tensor.into_data();
        self.push("constant", shape, data, Op::Leaf)
    }

    /// Differentiable input that is not a stored parameter (used by gradient checks).
    pub fn input(&mut self, tensor: Tensor) -> Result<Var> {
        let v = self.constant(tensor)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = self.track_params && self.params.get(id).requires_grad();
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op_name, shape, data, op)
    }

    fn map(&mut self, op_name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op_name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise product with constant values of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.data(a).len() {
            return Err(Error::shape("mul_const", format!("{} vs {}", self.data(a).len(), c.len())));
        }
        let data = self.data(a).iter().zip(&c).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul_const", shape, data, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the argument clamped to at least [`LOG_CLAMP`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, |x| x.max(LOG_CLAMP).ln(), Op::Log(a))
    }

    /// Adds a bias vector `[c]` to every row of `a` (`[..., c]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = split_last(self.shape(a));
        if self.data(bias).len() != cols {
            return Err(Error::shape("add_bias", format!("{:?} vs bias {:?}", self.shape(a), self.shape(bias))));
        }
        let b = self.data(bias);
        let data = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add_bias", shape, data, Op::AddBias(a, bias))
    }

    /// Multiplies every row of `a` (`[..., c]`) elementwise by `gain` (`[c]`).
    pub fn mul_bias(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (_, cols) = split_last(self.shape(a));
        if self.data(gain).len() != cols {
            return Err(Error::shape("mul_bias", format!("{:?} vs gain {:?}", self.shape(a), self.shape(gain))));
        }
        let g = self.data(gain);
        let data = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(g).map(|(x, y)| x * y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul_bias", shape, data, Op::MulBias(a, gain))
    }

    /// Matrix product of `[p, q]` and `[q, r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; p * r];
        kernels::matmul(self.data(a), self.data(b), &mut out, p, q, r);
        self.push("matmul", vec![p, r], out, Op::MatMul(a, b))
    }

    /// `x · W + b` for `x: [.., in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("{:?} vs leading {:?}", s, lead)));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.data(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", shape, data, Op::Concat(xs.to_vec()))
    }

    /// Columns `start..end` of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = split_last(&shape);
        if start > end || end > cols || shape.is_empty() {
            return Err(Error::shape("slice_last", format!("{start}..{end} of {shape:?}")));
        }
        let w = end - start;
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = w;
        self.push("slice_last", out_shape, data, Op::SliceLast(a, start, end))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let data = self.data(a).to_vec();
        self.push("reshape", shape, data, Op::Reshape(a))
    }

    /// `out[k] = flat(a)[indices[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.data(a);
        if indices.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("gather", format!("{} indices for {:?}", indices.len(), shape)));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in &indices {
            let v = *src.get(i).ok_or(Error::Index {
                op: "gather",
                index: i,
                size: src.len(),
            })?;
            data.push(v);
        }
        self.push("gather", shape, data, Op::Gather(a, indices))
    }

    /// Rows of `table` (`[V, d]`) selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("embedding", format!("table shape {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push("embedding", vec![ids.len(), d], data, Op::Embedding(table, ids.to_vec()))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = self.data(a).iter().sum();
        self.push("mean", Vec::new(), vec![s / n as f64], Op::Mean(a))
    }

    /// Sums the last dimension away.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("sum_last", "scalar input"));
        }
        let (_, cols) = split_last(&shape);
        let data = if cols == 0 {
            vec![0.0; shape[..shape.len() - 1].iter().product()]
        } else {
            self.data(a).chunks(cols).map(|r| r.iter().sum()).collect()
        };
        self.push("sum_last", shape[..shape.len() - 1].to_vec(), data, Op::SumLast(a))
    }

    /// Softmax over the last dimension.
    ///
    /// `valid` (same length as `a`) marks the positions that take part; masked
    /// positions get exactly zero probability. Every row needs at least one
    /// valid position.
    pub fn softmax(&mut self, a: Var, valid: Option<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("softmax", "scalar input"));
        }
        let (rows, cols) = split_last(&shape);
        if cols == 0 {
            return Err(Error::InvalidInput("softmax over an empty dimension".into()));
        }
        if let Some(m) = &valid {
            if m.len() != rows * cols {
                return Err(Error::shape("softmax", format!("mask of {} for {:?}", m.len(), shape)));
            }
        }
        let x = self.data(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let mask = valid.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
            if !kernels::softmax_row(&x[r * cols..(r + 1) * cols], mask, &mut out[r * cols..(r + 1) * cols]) {
                return Err(Error::InvalidInput(format!("softmax row {r} has every position masked")));
            }
        }
        self.push("softmax", shape, out, Op::Softmax(a))
    }

    /// Normalizes each row of the last dimension to zero mean, unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = split_last(&shape);
        let x = self.data(a);
        let mut out = vec![0.0; rows * cols];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mu) * s;
            }
            inv.push(s);
        }
        self.push("layer_norm", shape, out, Op::LayerNorm(a, inv))
    }

    /// Maximum over the last dimension. The gradient goes to the first
    /// (lowest-index) maximal entry.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape[shape.len() - 1] == 0 {
            return Err(Error::Contract("row_max over an empty dimension".into()));
        }
        let (_, cols) = split_last(&shape);
        let mut arg = Vec::new();
        let mut data = Vec::new();
        for row in self.data(a).chunks(cols) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        self.push("row_max", shape[..shape.len() - 1].to_vec(), data, Op::RowMax(a, arg))
    }

    /// Per-row cross entropy of `logits` (`[B, C]` or `[C]`) against class ids.
    /// Returns `[B]` (or a scalar for rank-1 logits).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (rows, cols) = split_last(&shape);
        if shape.is_empty() || rows != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} with {} targets", targets.len()),
            ));
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; rows * cols];
        let mut losses = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    size: cols,
                });
            }
            let row = &x[r * cols..(r + 1) * cols];
            kernels::softmax_row(row, None, &mut probs[r * cols..(r + 1) * cols]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[t]);
        }
        self.push(
            "cross_entropy",
            shape[..shape.len() - 1].to_vec(),
            losses,
            Op::CrossEntropy(logits, targets.to_vec(), probs),
        )
    }

    /// Row-wise select: row `r` comes from `a` where `take_a[r]`, else from `b`.
    pub fn where_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("where_rows", a, b)?;
        let shape = self.shape(a).to_vec();
        let (rows, cols) = split_last(&shape);
        if take_a.len() != rows {
            return Err(Error::shape("where_rows", format!("{} flags for {rows} rows", take_a.len())));
        }
        let (xa, xb) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(rows * cols);
        for (r, &t) in take_a.iter().enumerate() {
            let src = if t { xa } else { xb };
            data.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        self.push("where_rows", shape, data, Op::WhereRows(take_a.to_vec(), a, b))
    }

    /// `scores[b, i] = keys[b, i, :] · query[b, :]` for keys `[B, n, d]`, query `[B, d]`.
    pub fn batched_scores(&mut self, keys: Var, query: Var) -> Result<Var> {
        let (sk, sq) = (self.shape(keys), self.shape(query));
        if sk.len() != 3 || sq.len() != 2 || sk[0] != sq[0] || sk[2] != sq[1] {
            return Err(Error::shape("batched_scores", format!("keys {sk:?}, query {sq:?}")));
        }
        let (b, n, d) = (sk[0], sk[1], sk[2]);
        let (k, q) = (self.data(keys), self.data(query));
        let mut out = vec![0.0; b * n];
        for bi in 0..b {
            let qrow = &q[bi * d..(bi + 1) * d];
            for i in 0..n {
                out[bi * n + i] = kernels::dot(&k[(bi * n + i) * d..(bi * n + i + 1) * d], qrow);
            }
        }
        self.push("batched_scores", vec![b, n], out, Op::BatchedScores(keys, query))
    }

    /// `context[b, :] = Σ_i alpha[b, i] · values[b, i, :]`.
    pub fn batched_context(&mut self, alpha: Var, values: Var) -> Result<Var> {
        let (sa, sv) = (self.shape(alpha), self.shape(values));
        if sa.len() != 2 || sv.len() != 3 || sa[0] != sv[0] || sa[1] != sv[1] {
            return Err(Error::shape("batched_context", format!("alpha {sa:?}, values {sv:?}")));
        }
        let (b, n, d) = (sv[0], sv[1], sv[2]);
        let (al, v) = (self.data(alpha), self.data(values));
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            let orow = &mut out[bi * d..(bi + 1) * d];
            for i in 0..n {
                kernels::axpy(al[bi * n + i], &v[(bi * n + i) * d..(bi * n + i + 1) * d], orow);
            }
        }
        self.push("batched_context", vec![b, d], out, Op::BatchedContext(alpha, values))
    }

    /// Scaled per-head dot products of `q`, `k` (`[B, n, D]`) giving `[B, H, n, n]`.
    pub fn head_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        self.same_shape("head_scores", q, k)?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape("head_scores", format!("{s:?} with {heads} heads")));
        }
        let (b, n, dm) = (s[0], s[1], s[2]);
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (xq, xk) = (self.data(q), self.data(k));
        let mut out = vec![0.0; b * heads * n * n];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..n {
                    let qi = &xq[(bi * n + i) * dm + h * dh..(bi * n + i) * dm + (h + 1) * dh];
                    let base = ((bi * heads + h) * n + i) * n;
                    for j in 0..n {
                        let kj = &xk[(bi * n + j) * dm + h * dh..(bi * n + j) * dm + (h + 1) * dh];
                        out[base + j] = scale * kernels::dot(qi, kj);
                    }
                }
            }
        }
        self.push("head_scores", vec![b, heads, n, n], out, Op::HeadScores(q, k, heads, scale))
    }

    /// Applies per-head attention `p` (`[B, H, n, n]`) to values `v` (`[B, n, D]`).
    pub fn head_apply(&mut self, p: Var, v: Var) -> Result<Var> {
        let (sp, sv) = (self.shape(p).to_vec(), self.shape(v).to_vec());
        if sp.len() != 4 || sv.len() != 3 || sp[0] != sv[0] || sp[2] != sv[1] || sp[3] != sv[1] || sv[2] % sp[1] != 0 {
            return Err(Error::shape("head_apply", format!("p {sp:?}, v {sv:?}")));
        }
        let (b, heads, n, dm) = (sp[0], sp[1], sp[2], sv[2]);
        let dh = dm / heads;
        let (xp, xv) = (self.data(p), self.data(v));
        let mut out = vec![0.0; b * n * dm];
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..n {
                    let prow = &xp[((bi * heads + h) * n + i) * n..((bi * heads + h) * n + i + 1) * n];
                    let orow = &mut out[(bi * n + i) * dm + h * dh..(bi * n + i) * dm + (h + 1) * dh];
                    for (j, &w) in prow.iter().enumerate() {
                        kernels::axpy(w, &xv[(bi * n + j) * dm + h * dh..(bi * n + j) * dm + (h + 1) * dh], orow);
                    }
                }
            }
        }
        self.push("head_apply", vec![b, n, dm], out, Op::HeadApply(p, v, heads))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.requires_grad => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.tensor(Var(idx));
        let y = out.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.rg(v) {
                let len = self.data(v).len();
                accumulate(&mut grads[v.0], len, |buf| f(buf));
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, &mut |buf| kernels::add_assign(buf, g));
                acc(*b, &mut |buf| kernels::add_assign(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| kernels::add_assign(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o -= gi));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |buf| {
                    for ((o, gi), bi) in buf.iter_mut().zip(g).zip(xb) {
                        *o += gi * bi;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gi), ai) in buf.iter_mut().zip(g).zip(xa) {
                        *o += gi * ai;
                    }
                });
            }
            Op::MulConst(a, c) => acc(*a, &mut |buf| {
                for ((o, gi), ci) in buf.iter_mut().zip(g).zip(c) {
                    *o += gi * ci;
                }
            }),
            Op::Scale(a, c) => acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, gi)| *o += c * gi)),
            Op::AddScalar(a) => acc(*a, &mut |buf| kernels::add_assign(buf, g)),
            Op::AddBias(a, b) => {
                acc(*a, &mut |buf| kernels::add_assign(buf, g));
                let cols = self.data(*b).len();
                acc(*b, &mut |buf| {
                    for row in g.chunks(cols) {
                        kernels::add_assign(buf, row);
                    }
                });
            }
            Op::MulBias(a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let cols = xb.len();
                acc(*a, &mut |buf| {
                    for (orow, grow) in buf.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((o, gi), bi) in orow.iter_mut().zip(grow).zip(xb) {
                            *o += gi * bi;
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for (arow, grow) in xa.chunks(cols).zip(g.chunks(cols)) {
                        for ((o, gi), ai) in buf.iter_mut().zip(grow).zip(arow) {
                            *o += gi * ai;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (p, q, r) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (self.data(*a), self.data(*b));
                acc(*a, &mut |buf| kernels::matmul_grad_a(g, xb, buf, p, q, r));
                acc(*b, &mut |buf| kernels::matmul_grad_b(xa, g, buf, p, q, r));
            }
            Op::Tanh(a) => acc(*a, &mut |buf| {
                for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *o += gi * (1.0 - yi * yi);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |buf| {
                for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }),
            Op::Relu(a) => acc(*a, &mut |buf| {
                for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    if *yi > 0.0 {
                        *o += gi;
                    }
                }
            }),
            Op::Exp(a) => acc(*a, &mut |buf| {
                for ((o, gi), yi) in buf.iter_mut().zip(g).zip(y) {
                    *o += gi * yi;
                }
            }),
            Op::Log(a) => {
                let x = self.data(*a);
                acc(*a, &mut |buf| {
                    for ((o, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                        *o += gi / xi.max(LOG_CLAMP);
                    }
                })
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|x| *self.shape(*x).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for (x, w) in xs.iter().zip(&widths) {
                    let (off, w) = (offset, *w);
                    acc(*x, &mut |buf| {
                        for r in 0..rows {
                            kernels::add_assign(&mut buf[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceLast(a, start, end) => {
                let cols = *self.shape(*a).last().unwrap();
                let w = end - start;
                if w > 0 {
                    acc(*a, &mut |buf| {
                        for (r, grow) in g.chunks(w).enumerate() {
                            kernels::add_assign(&mut buf[r * cols + start..r * cols + end], grow);
                        }
                    })
                }
            }
            Op::Reshape(a) => acc(*a, &mut |buf| kernels::add_assign(buf, g)),
            Op::Gather(a, indices) => acc(*a, &mut |buf| {
                for (gi, &i) in g.iter().zip(indices) {
                    buf[i] += gi;
                }
            }),
            Op::Embedding(table, ids) => {
                let d = self.shape(*table)[1];
                acc(*table, &mut |buf| {
                    for (k, &id) in ids.iter().enumerate() {
                        kernels::add_assign(&mut buf[id * d..(id + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(a) => {
                let n = self.data(*a).len() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0] / n))
            }
            Op::SumLast(a) => {
                let cols = *self.shape(*a).last().unwrap();
                acc(*a, &mut |buf| {
                    if cols > 0 {
                        for (row, gi) in buf.chunks_mut(cols).zip(g) {
                            row.iter_mut().for_each(|o| *o += gi);
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let cols = *self.shape(*a).last().unwrap();
                acc(*a, &mut |buf| {
                    for ((orow, grow), yrow) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let s = kernels::dot(grow, yrow);
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yi * (gi - s);
                        }
                    }
                })
            }
            Op::LayerNorm(a, inv) => {
                let cols = *self.shape(*a).last().unwrap();
                acc(*a, &mut |buf| {
                    for (r, ((orow, grow), yrow)) in
                        buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)).enumerate()
                    {
                        let mg = grow.iter().sum::<f64>() / cols as f64;
                        let mgy = kernels::dot(grow, yrow) / cols as f64;
                        for ((o, gi), yi) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += inv[r] * (gi - mg - yi * mgy);
                        }
                    }
                })
            }
            Op::RowMax(a, arg) => {
                let cols = *self.shape(*a).last().unwrap();
                acc(*a, &mut |buf| {
                    for (r, (&k, gi)) in arg.iter().zip(g).enumerate() {
                        buf[r * cols + k] += gi;
                    }
                })
            }
            Op::CrossEntropy(a, targets, probs) => {
                let cols = *self.shape(*a).last().unwrap();
                acc(*a, &mut |buf| {
                    for (r, (&t, gi)) in targets.iter().zip(g).enumerate() {
                        let row = &mut buf[r * cols..(r + 1) * cols];
                        for (o, p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *o += gi * p;
                        }
                        row[t] -= gi;
                    }
                })
            }
            Op::WhereRows(take_a, a, b) => {
                let cols = g.len() / take_a.len().max(1);
                acc(*a, &mut |buf| {
                    for (r, &t) in take_a.iter().enumerate() {
                        if t {
                            kernels::add_assign(&mut buf[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                });
                acc(*b, &mut |buf| {
                    for (r, &t) in take_a.iter().enumerate() {
                        if !t {
                            kernels::add_assign(&mut buf[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        }
                    }
                });
            }
            Op::BatchedScores(keys, query) => {
                let s = self.shape(*keys);
                let (b, n, d) = (s[0], s[1], s[2]);
                let (k, q) = (self.data(*keys), self.data(*query));
                acc(*keys, &mut |buf| {
                    for bi in 0..b {
                        for i in 0..n {
                            kernels::axpy(g[bi * n + i], &q[bi * d..(bi + 1) * d], &mut buf[(bi * n + i) * d..(bi * n + i + 1) * d]);
                        }
                    }
                });
                acc(*query, &mut |buf| {
                    for bi in 0..b {
                        for i in 0..n {
                            kernels::axpy(g[bi * n + i], &k[(bi * n + i) * d..(bi * n + i + 1) * d], &mut buf[bi * d..(bi + 1) * d]);
                        }
                    }
                });
            }
            Op::BatchedContext(alpha, values) => {
                let s = self.shape(*values);
                let (b, n, d) = (s[0], s[1], s[2]);
                let (al, v) = (self.data(*alpha), self.data(*values));
                acc(*alpha, &mut |buf| {
                    for bi in 0..b {
                        for i in 0..n {
                            buf[bi * n + i] += kernels::dot(&g[bi * d..(bi + 1) * d], &v[(bi * n + i) * d..(bi * n + i + 1) * d]);
                        }
                    }
                });
                acc(*values, &mut |buf| {
                    for bi in 0..b {
                        for i in 0..n {
                            kernels::axpy(al[bi * n + i], &g[bi * d..(bi + 1) * d], &mut buf[(bi * n + i) * d..(bi * n + i + 1) * d]);
                        }
                    }
                });
            }
            Op::HeadScores(q, k, heads, scale) => {
                let s = self.shape(*q);
                let (b, n, dm) = (s[0], s[1], s[2]);
                let (heads, scale) = (*heads, *scale);
                let dh = dm / heads;
                let (xq, xk) = (self.data(*q), self.data(*k));
                acc(*q, &mut |buf| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for i in 0..n {
                                let base = ((bi * heads + h) * n + i) * n;
                                let qi = (bi * n + i) * dm + h * dh;
                                for j in 0..n {
                                    let kj = (bi * n + j) * dm + h * dh;
                                    kernels::axpy(scale * g[base + j], &xk[kj..kj + dh], &mut buf[qi..qi + dh]);
                                }
                            }
                        }
                    }
                });
                acc(*k, &mut |buf| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for i in 0..n {
                                let base = ((bi * heads + h) * n + i) * n;
                                let qi = (bi * n + i) * dm + h * dh;
                                for j in 0..n {
                                    let kj = (bi * n + j) * dm + h * dh;
                                    kernels::axpy(scale * g[base + j], &xq[qi..qi + dh], &mut buf[kj..kj + dh]);
                                }
                            }
                        }
                    }
                });
            }
            Op::HeadApply(p, v, heads) => {
                let sp = self.shape(*p);
                let (b, heads, n) = (sp[0], *heads, sp[2]);
                let dm = self.shape(*v)[2];
                let dh = dm / heads;
                let (xp, xv) = (self.data(*p), self.data(*v));
                acc(*p, &mut |buf| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for i in 0..n {
                                let gi = (bi * n + i) * dm + h * dh;
                                let base = ((bi * heads + h) * n + i) * n;
                                for j in 0..n {
                                    let vj = (bi * n + j) * dm + h * dh;
                                    buf[base + j] += kernels::dot(&g[gi..gi + dh], &xv[vj..vj + dh]);
                                }
                            }
                        }
                    }
                });
                acc(*v, &mut |buf| {
                    for bi in 0..b {
                        for h in 0..heads {
                            for i in 0..n {
                                let gi = (bi * n + i) * dm + h * dh;
                                let base = ((bi * heads + h) * n + i) * n;
                                for j in 0..n {
                                    let vj = (bi * n + j) * dm + h * dh;
                                    kernels::axpy(xp[base + j], &g[gi..gi + dh], &mut buf[vj..vj + dh]);
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}
