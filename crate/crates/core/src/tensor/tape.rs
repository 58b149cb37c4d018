use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::{Result, Tensor, TensorError};
use crate::Scalar;

pub type NodeId = usize;

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Normalize { input: NodeId, rstd: Vec<T> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { input: NodeId, start: usize },
    SliceCols { input: NodeId, start: usize },
    Reshape(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<T>,
        count: usize,
    },
    Sum(NodeId),
    MeanRows(NodeId),
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

/// Gradients of a scalar loss with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.get_id(v.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take_id(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix<T: Scalar>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::new(vec![rows, cols], data).expect("kernel output matches its shape")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), false)
    }

    pub fn leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    pub(crate) fn handle(&self, id: NodeId) -> Var<'_, T> {
        Var { tape: self, id }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Stacks matrices with equal column counts, in argument order.
    pub fn concat_rows(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let v0 = first.value();
        let cols = v0.matrix_dims("concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            let (r, c) = v.matrix_dims("concat_rows")?;
            if c != cols {
                return Err(mismatch("concat_rows", &v0, &v));
            }
            data.extend_from_slice(v.data());
            rows += r;
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        self.push("concat_rows", matrix(rows, cols, data), Op::ConcatRows(ids.clone()), &ids)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&self, parts: &[Var<'_, T>]) -> Result<Var<'_, T>> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let v0 = first.value();
        let rows = v0.matrix_dims("concat_cols")?.0;
        let vals: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let mut cols = 0;
        for v in &vals {
            let (r, c) = v.matrix_dims("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", &v0, v));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(i));
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        self.push("concat_cols", matrix(rows, cols, data), Op::ConcatCols(ids.clone()), &ids)
    }

    /// Reverse sweep from a one-element loss.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(lv.shape().to_vec(), vec![T::one()])?);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = |target: NodeId, delta: Tensor<T>| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                            *e = *e + *d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (av.rows(), av.cols());
                    let n = bv.cols();
                    if nodes[*a].requires_grad {
                        acc(*a, matrix(m, k, kernels::matmul_nt(g.data(), bv.data(), m, n, k)));
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, matrix(k, n, kernels::matmul_tn(av.data(), g.data(), m, k, n)));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, zip_map(&g, bv, |x, y| x * y));
                    acc(*b, zip_map(&g, av, |x, y| x * y));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(*a, g.map(|x| x * c));
                }
                Op::AddRow(a, row) => {
                    let rv = &nodes[*row].value;
                    acc(*row, Tensor::new(rv.shape().to_vec(), column_sums(&g))?);
                    acc(*a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let (av, rv) = (&nodes[*a].value, &nodes[*row].value);
                    let cols = g.cols();
                    let mut da = g.clone();
                    let mut drow = vec![T::zero(); cols];
                    for i in 0..g.rows() {
                        for j in 0..cols {
                            let gij = g.get(i, j);
                            da.set(i, j, gij * rv.data()[j]);
                            drow[j] = drow[j] + gij * av.get(i, j);
                        }
                    }
                    acc(*a, da);
                    acc(*row, Tensor::new(rv.shape().to_vec(), drow)?);
                }
                Op::Relu(a) => {
                    let av = &nodes[*a].value;
                    acc(*a, zip_map(&g, av, |gv, x| if x > T::zero() { gv } else { T::zero() }));
                }
                Op::Tanh(a) => acc(*a, zip_map(&g, out, |gv, y| gv * (T::one() - y * y))),
                Op::Sigmoid(a) => acc(*a, zip_map(&g, out, |gv, y| gv * y * (T::one() - y))),
                Op::Softmax(a) => {
                    let (r, c) = (out.rows(), out.cols());
                    acc(*a, matrix(r, c, kernels::softmax_backward(out.data(), g.data(), r, c)));
                }
                Op::Normalize { input, rstd } => {
                    let (r, c) = (out.rows(), out.cols());
                    let dx = kernels::normalize_backward(out.data(), g.data(), rstd, r, c);
                    acc(*input, matrix(r, c, dx));
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = nodes[p].value.rows();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(p, Tensor::new(nodes[p].value.shape().to_vec(), slice)?);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = (g.rows(), g.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let cols = nodes[p].value.cols();
                        let mut data = Vec::with_capacity(rows * cols);
                        for i in 0..rows {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + cols]);
                        }
                        acc(p, Tensor::new(nodes[p].value.shape().to_vec(), data)?);
                        offset += cols;
                    }
                }
                Op::SliceRows { input, start } => {
                    let iv = &nodes[*input].value;
                    let cols = iv.cols();
                    let mut data = vec![T::zero(); iv.len()];
                    data[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(*input, Tensor::new(iv.shape().to_vec(), data)?);
                }
                Op::SliceCols { input, start } => {
                    let iv = &nodes[*input].value;
                    let (rows, cols) = (iv.rows(), iv.cols());
                    let width = g.cols();
                    let mut data = vec![T::zero(); rows * cols];
                    for i in 0..rows {
                        data[i * cols + start..i * cols + start + width].copy_from_slice(g.row(i));
                    }
                    acc(*input, Tensor::new(iv.shape().to_vec(), data)?);
                }
                Op::Reshape(a) => {
                    let shape = nodes[*a].value.shape().to_vec();
                    acc(*a, Tensor::new(shape, g.data().to_vec())?);
                }
                Op::Embedding { table, ids } => {
                    let tv = &nodes[*table].value;
                    let cols = tv.cols();
                    let mut data = vec![T::zero(); tv.len()];
                    for (i, &id) in ids.iter().enumerate() {
                        for (d, &gv) in data[id * cols..(id + 1) * cols].iter_mut().zip(g.row(i)) {
                            *d = *d + gv;
                        }
                    }
                    acc(*table, Tensor::new(tv.shape().to_vec(), data)?);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    pad,
                    probs,
                    count,
                } => {
                    let lv = &nodes[*logits].value;
                    let cols = lv.cols();
                    let scale = g.item() / T::of(*count as f64);
                    let mut data = vec![T::zero(); lv.len()];
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for j in 0..cols {
                            let p = probs[i * cols + j];
                            let onehot = if j == t { T::one() } else { T::zero() };
                            data[i * cols + j] = (p - onehot) * scale;
                        }
                    }
                    acc(*logits, Tensor::new(lv.shape().to_vec(), data)?);
                }
                Op::Sum(a) => {
                    let av = &nodes[*a].value;
                    acc(*a, Tensor::new(av.shape().to_vec(), vec![g.item(); av.len()])?);
                }
                Op::MeanRows(a) => {
                    let av = &nodes[*a].value;
                    let inv = T::one() / T::of(av.rows() as f64);
                    let row: Vec<T> = g.data().iter().map(|&x| x * inv).collect();
                    let mut data = Vec::with_capacity(av.len());
                    for _ in 0..av.rows() {
                        data.extend_from_slice(&row);
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), data)?);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    let cols = g.cols();
    let mut out = vec![T::zero(); cols];
    for i in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o = *o + v;
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn unary(self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Self> {
        let v = self.value();
        self.tape.push(name, v.map(f), op, &[self.id])
    }

    fn same_shape(self, name: &'static str, rhs: Self) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &a, &b));
        }
        Ok((a, b))
    }

    pub fn matmul(self, rhs: Self) -> Result<Self> {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = a.matrix_dims("matmul")?;
        let (k2, n) = b.matrix_dims("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", &a, &b));
        }
        let c = matrix(m, n, kernels::matmul(a.data(), b.data(), m, k, n));
        self.tape.push("matmul", c, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn transpose(self) -> Result<Self> {
        let v = self.value();
        v.matrix_dims("transpose")?;
        self.tape.push("transpose", v.transpose(), Op::Transpose(self.id), &[self.id])
    }

    pub fn add(self, rhs: Self) -> Result<Self> {
        let (a, b) = self.same_shape("add", rhs)?;
        let out = zip_map(&a, &b, |x, y| x + y);
        self.tape.push("add", out, Op::Add(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn sub(self, rhs: Self) -> Result<Self> {
        let (a, b) = self.same_shape("sub", rhs)?;
        let out = zip_map(&a, &b, |x, y| x - y);
        self.tape.push("sub", out, Op::Sub(self.id, rhs.id), &[self.id, rhs.id])
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Self) -> Result<Self> {
        let (a, b) = self.same_shape("mul", rhs)?;
        let out = zip_map(&a, &b, |x, y| x * y);
        self.tape.push("mul", out, Op::Mul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn scale(self, c: T) -> Result<Self> {
        self.unary("scale", Op::Scale(self.id, c), |x| x * c)
    }

    fn row_broadcast(self, name: &'static str, row: Self) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>)> {
        let (a, r) = (self.value(), row.value());
        let (_, cols) = a.matrix_dims(name)?;
        if r.len() != cols {
            return Err(mismatch(name, &a, &r));
        }
        Ok((a, r))
    }

    /// Adds a `1×n` (or length-`n`) row to every row of an `m×n` matrix.
    pub fn add_row(self, row: Self) -> Result<Self> {
        let (a, r) = self.row_broadcast("add_row", row)?;
        let cols = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r.data()[i % cols])
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.push("add_row", out, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    /// Multiplies every row elementwise by a `1×n` row.
    pub fn mul_row(self, row: Self) -> Result<Self> {
        let (a, r) = self.row_broadcast("mul_row", row)?;
        let cols = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r.data()[i % cols])
            .collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.push("mul_row", out, Op::MulRow(self.id, row.id), &[self.id, row.id])
    }

    pub fn relu(self) -> Result<Self> {
        self.unary("relu", Op::Relu(self.id), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary("tanh", Op::Tanh(self.id), |x| x.tanh())
    }

    pub fn sigmoid(self) -> Result<Self> {
        self.unary("sigmoid", Op::Sigmoid(self.id), kernels::sigmoid)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(self) -> Result<Self> {
        self.softmax_impl(false)
    }

    /// Row-wise softmax where row `i` sees only columns `0..=i`.
    pub fn causal_softmax_rows(self) -> Result<Self> {
        self.softmax_impl(true)
    }

    fn softmax_impl(self, causal: bool) -> Result<Self> {
        let v = self.value();
        let (r, c) = v.matrix_dims("softmax_rows")?;
        let out = matrix(r, c, kernels::softmax_rows(v.data(), r, c, causal));
        self.tape.push("softmax_rows", out, Op::Softmax(self.id), &[self.id])
    }

    /// Per-row standardisation without the affine part of layer norm.
    pub fn normalize_rows(self, eps: T) -> Result<Self> {
        let v = self.value();
        let (r, c) = v.matrix_dims("layer_norm")?;
        let (out, rstd) = kernels::normalize_rows(v.data(), r, c, eps);
        self.tape.push(
            "layer_norm",
            matrix(r, c, out),
            Op::Normalize { input: self.id, rstd },
            &[self.id],
        )
    }

    /// Layer normalisation with a per-column gain and bias.
    pub fn layer_norm(self, gain: Self, bias: Self, eps: T) -> Result<Self> {
        self.normalize_rows(eps)?.mul_row(gain)?.add_row(bias)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Self> {
        let v = self.value();
        let (r, c) = v.matrix_dims("slice_rows")?;
        if start + len > r {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: r,
            });
        }
        let out = matrix(len, c, v.data()[start * c..(start + len) * c].to_vec());
        self.tape.push("slice_rows", out, Op::SliceRows { input: self.id, start }, &[self.id])
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Self> {
        let v = self.value();
        let (r, c) = v.matrix_dims("slice_cols")?;
        if start + len > c {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        self.tape.push("slice_cols", matrix(r, len, data), Op::SliceCols { input: self.id, start }, &[self.id])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let v = self.value();
        let out = Tensor::new(shape, v.data().to_vec())?;
        self.tape.push("reshape", out, Op::Reshape(self.id), &[self.id])
    }

    /// Gathers table rows: output row `i` is `self[ids[i]]`.
    pub fn embedding(self, ids: &[usize]) -> Result<Self> {
        let table = self.value();
        let (rows, cols) = table.matrix_dims("embedding_lookup")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::OutOfRange {
                    op: "embedding_lookup",
                    index: id,
                    extent: rows,
                });
            }
            data.extend_from_slice(table.row(id));
        }
        self.tape.push(
            "embedding_lookup",
            matrix(ids.len(), cols, data),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            &[self.id],
        )
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of the
    /// logits, skipping positions whose target equals `pad`.
    pub fn cross_entropy(self, targets: &[usize], pad: usize) -> Result<Self> {
        let v = self.value();
        let (rows, cols) = v.matrix_dims("cross_entropy")?;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            if t >= cols {
                return Err(TensorError::OutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: cols,
                });
            }
            let row = v.row(i);
            let lse = kernels::log_sum_exp(row);
            for (p, &x) in probs[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            total = total + (lse - row[t]);
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        let loss = Tensor::scalar(total / T::of(count as f64));
        self.tape.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
            &[self.id],
        )
    }

    pub fn sum(self) -> Result<Self> {
        let v = self.value();
        let s = v.data().iter().fold(T::zero(), |a, &b| a + b);
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    /// Column means: `m×n → 1×n`.
    pub fn mean_rows(self) -> Result<Self> {
        let v = self.value();
        let (r, _) = v.matrix_dims("mean_rows")?;
        if r == 0 {
            return Err(TensorError::Empty { op: "mean_rows" });
        }
        let inv = T::one() / T::of(r as f64);
        let data = column_sums(&v).into_iter().map(|x| x * inv).collect();
        self.tape.push("mean_rows", Tensor::row_vector(data), Op::MeanRows(self.id), &[self.id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = tape.var(t(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0f64));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.var(t(&[&[1.0, 2.0]]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros(2, 3));
        let b = tape.constant(Tensor::<f64>::zeros(2, 3));
        let err = a.matmul(b).map(|_| ()).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn overflow_is_an_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f32>::full(1, 1, 3.0e38));
        assert!(matches!(a.add(a), Err(TensorError::NonFinite { op: "add" })));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let tape = Tape::new();
        let x = tape.var(t(&[&[0.3, -1.2]]));
        let a = x.tanh().unwrap();
        let b = x.scale(2.0).unwrap();
        let loss = a.add(b).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).unwrap();
        for (j, &xv) in [0.3f64, -1.2].iter().enumerate() {
            let expect = (1.0 - xv.tanh().powi(2)) + 2.0;
            assert!((gx.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(t(&[&[1.0, 2.0]]));
        let x = tape.var(t(&[&[3.0, 4.0]]));
        let loss = c.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn all_pad_targets_are_degenerate() {
        let tape = Tape::new();
        let logits = tape.var(Tensor::<f64>::zeros(3, 4));
        let err = logits.cross_entropy(&[0, 0, 0], 0).map(|_| ()).unwrap_err();
        assert_eq!(err, TensorError::DegenerateBatch);
    }

    #[test]
    fn embedding_out_of_range() {
        let tape = Tape::new();
        let table = tape.var(Tensor::<f64>::zeros(3, 2));
        assert!(matches!(
            table.embedding(&[1, 3]),
            Err(TensorError::OutOfRange { index: 3, extent: 3, .. })
        ));
    }
}
