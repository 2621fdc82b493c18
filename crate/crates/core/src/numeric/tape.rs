//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node whose inputs precede it, so the node vector is a
//! topological order and `backward` is a single reverse sweep. Parameters are
//! read from a borrowed [`ParamStore`] without copying; gradients come back as
//! a detached [`Gradients`] value that the caller folds into the store.

use std::collections::HashMap;

use super::tensor::{self, dot_slices, Tensor};
use super::{Gradients, NumericError, ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Slice(Var, usize),
    Row(Var, usize),
    GatherRows(Var, Vec<usize>),
    Stack(Vec<Var>),
    Sum(Var),
    Dot(Var, Var),
    Softmax(Var, Vec<bool>),
    LogSoftmax(Var),
    Pick(Var, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    requires_grad: bool,
}

/// Record of primitive operations for one forward/backward cycle.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Tape<'static> {
    /// A tape with no parameter store; only constants and leaves.
    pub fn detached() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
        }
    }

    pub fn store(&self) -> Option<&'p ParamStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.param_vars.retain(|_, v| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("param node without store").value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// An untracked constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// A tracked input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// The node for a stored parameter (one per parameter per tape).
    pub fn param(&mut self, id: ParamId) -> Result<Var, NumericError> {
        if let Some(v) = self.param_vars.get(&id) {
            return Ok(*v);
        }
        let store = self.store.ok_or(NumericError::UnknownParam(id.0))?;
        if id.0 >= store.len() {
            return Err(NumericError::UnknownParam(id.0));
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var, NumericError> {
        let out = tensor::matvec(self.value(w), self.value(x))?;
        let rg = self.rg(w) || self.rg(x);
        Ok(self.push(Op::MatVec(w, x), out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericError> {
        let out = tensor::transpose(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let out = tensor::hadamard(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Hadamard(a, b), out, rg))
    }

    /// `scale * x + shift` with constant scale and shift.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = tensor::map(self.value(x), |v| scale * v + shift);
        let rg = self.rg(x);
        self.push(Op::Affine(x, scale), out, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let rg = self.rg(x);
        self.push(Op::Relu(x), out, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.value(x));
        let rg = self.rg(x);
        self.push(Op::Sigmoid(x), out, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = tensor::tanh(self.value(x));
        let rg = self.rg(x);
        self.push(Op::Tanh(x), out, rg)
    }

    /// Concatenates 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 1 {
                return Err(NumericError::InvalidShape(t.shape().to_vec()));
            }
            data.extend_from_slice(t.data());
        }
        if data.is_empty() {
            return Err(NumericError::InvalidShape(vec![0]));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), rg))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| {
                self.value(p)
                    .dims2()
                    .ok_or_else(|| NumericError::InvalidShape(self.value(p).shape().to_vec()))
            })
            .collect::<Result<_, _>>()?;
        let rows = dims.first().map(|d| d.0).ok_or(NumericError::InvalidShape(vec![0]))?;
        if dims.iter().any(|d| d.0 != rows) {
            return Err(NumericError::ShapeMismatch {
                op: "concat_cols",
                left: vec![rows],
                right: dims.iter().map(|d| d.0).collect(),
            });
        }
        let cols: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    /// `x[start..start + len]` of a 1-D tensor.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericError> {
        let t = self.value(x);
        if t.rank() != 1 || len == 0 || start + len > t.numel() {
            return Err(NumericError::InvalidShape(t.shape().to_vec()));
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        let rg = self.rg(x);
        Ok(self.push(Op::Slice(x, start), out, rg))
    }

    /// Row `i` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, table: Var, i: usize) -> Result<Var, NumericError> {
        let t = self.value(table);
        let (rows, _) = t.dims2().ok_or_else(|| NumericError::InvalidShape(t.shape().to_vec()))?;
        if i >= rows {
            return Err(NumericError::IndexOutOfRange { index: i, len: rows });
        }
        let out = Tensor::vector(t.row(i).to_vec());
        let rg = self.rg(table);
        Ok(self.push(Op::Row(table, i), out, rg))
    }

    /// Selected rows of a 2-D tensor, stacked in the given order.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, NumericError> {
        let t = self.value(table);
        let (rows, cols) = t.dims2().ok_or_else(|| NumericError::InvalidShape(t.shape().to_vec()))?;
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(NumericError::IndexOutOfRange { index: i, len: rows });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        let rg = self.rg(table);
        Ok(self.push(Op::GatherRows(table, idx.to_vec()), out, rg))
    }

    /// Stacks equal-length 1-D tensors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var, NumericError> {
        let cols = rows
            .first()
            .map(|&r| self.value(r).numel())
            .ok_or(NumericError::InvalidShape(vec![0]))?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.numel() != cols {
                return Err(NumericError::InvalidShape(t.shape().to_vec()));
            }
            data.extend_from_slice(t.data());
        }
        let rg = rows.iter().any(|&r| self.rg(r));
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(Op::Stack(rows.to_vec()), out, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericError::ShapeMismatch {
                op: "dot",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let s = dot_slices(ta.data(), tb.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s), rg))
    }

    /// Row-wise masked softmax; see [`tensor::masked_softmax`].
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var, NumericError> {
        let out = tensor::masked_softmax(self.value(x), mask)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Softmax(x, mask.to_vec()), out, rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericError> {
        let mask = vec![true; self.value(x).numel()];
        self.masked_softmax(x, &mask)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumericError> {
        let out = tensor::log_softmax(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(Op::LogSoftmax(x), out, rg))
    }

    /// Element `i` of a tensor (flat index) as a scalar.
    pub fn pick(&mut self, x: Var, i: usize) -> Result<Var, NumericError> {
        let t = self.value(x);
        if i >= t.numel() {
            return Err(NumericError::IndexOutOfRange {
                index: i,
                len: t.numel(),
            });
        }
        let out = Tensor::scalar(t.data()[i]);
        let rg = self.rg(x);
        Ok(self.push(Op::Pick(x, i), out, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Parameters that did not participate get no entry (zero gradient).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericError> {
        if self.consumed {
            return Err(NumericError::TapeConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(NumericError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads = Gradients {
            params: vec![None; self.store.map_or(0, ParamStore::len)],
            leaves: HashMap::new(),
        };
        if !self.rg(loss) {
            return Ok(grads);
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        grads.leaves.insert(i, g);
                    }
                }
                Op::Param(id) => grads.add_param(*id, g),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2().unwrap();
                    let n = tb.dims2().unwrap().1;
                    if self.rg(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            let grow = &g.data()[r * n..(r + 1) * n];
                            for p in 0..k {
                                da[r * k + p] = dot_slices(grow, tb.row(p));
                            }
                        }
                        self.acc(&mut adj, *a, Tensor::new(vec![m, k], da).unwrap());
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * n];
                        for r in 0..m {
                            let grow = &g.data()[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = ta.data()[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                        self.acc(&mut adj, *b, Tensor::new(vec![k, n], db).unwrap());
                    }
                }
                Op::MatVec(w, x) => {
                    let (tw, tx) = (self.value(*w), self.value(*x));
                    let (m, k) = tw.dims2().unwrap();
                    if self.rg(*w) {
                        let mut dw = vec![0.0; m * k];
                        for (r, gv) in g.data().iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            for (d, xv) in dw[r * k..(r + 1) * k].iter_mut().zip(tx.data()) {
                                *d = gv * xv;
                            }
                        }
                        self.acc(&mut adj, *w, Tensor::new(vec![m, k], dw).unwrap());
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0; k];
                        for (r, gv) in g.data().iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            for (d, wv) in dx.iter_mut().zip(tw.row(r)) {
                                *d += gv * wv;
                            }
                        }
                        self.acc(&mut adj, *x, Tensor::vector(dx));
                    }
                }
                Op::Transpose(a) => {
                    let t = tensor::transpose(&g).unwrap();
                    self.acc(&mut adj, *a, t);
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if self.rg(v) {
                            let shaped = self.reduce_broadcast(v, g.clone());
                            self.acc(&mut adj, v, shaped);
                        }
                    }
                }
                Op::Hadamard(a, b) => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if self.rg(v) {
                            let prod = tensor::hadamard(&g, self.value(other)).unwrap();
                            let shaped = self.reduce_broadcast(v, prod);
                            self.acc(&mut adj, v, shaped);
                        }
                    }
                }
                Op::Affine(x, scale) => {
                    let s = *scale;
                    self.acc(&mut adj, *x, tensor::map(&g, |v| v * s));
                }
                Op::Relu(x) => {
                    let y = node.value.as_ref().unwrap();
                    let d = tensor::zip_broadcast("relu", &g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 })
                        .unwrap();
                    self.acc(&mut adj, *x, d);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().unwrap();
                    let d = tensor::zip_broadcast("sigmoid", &g, y, |gv, yv| gv * yv * (1.0 - yv)).unwrap();
                    self.acc(&mut adj, *x, d);
                }
                Op::Tanh(x) => {
                    let y = node.value.as_ref().unwrap();
                    let d = tensor::zip_broadcast("tanh", &g, y, |gv, yv| gv * (1.0 - yv * yv)).unwrap();
                    self.acc(&mut adj, *x, d);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        if self.rg(p) {
                            let d = Tensor::vector(g.data()[off..off + n].to_vec());
                            self.acc(&mut adj, p, d);
                        }
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, cols) = g.dims2().unwrap();
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.value(p).dims2().unwrap().1;
                        if self.rg(p) {
                            let mut d = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * cols + off..r * cols + off + pc]);
                            }
                            self.acc(&mut adj, p, Tensor::new(vec![rows, pc], d).unwrap());
                        }
                        off += pc;
                    }
                }
                Op::Slice(x, start) => {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    d.data_mut()[*start..*start + g.numel()].copy_from_slice(g.data());
                    self.acc(&mut adj, *x, d);
                }
                Op::Row(table, r) => self.scatter_rows(&mut adj, &mut grads, *table, &[*r], &g),
                Op::GatherRows(table, idx) => self.scatter_rows(&mut adj, &mut grads, *table, idx, &g),
                Op::Stack(rows) => {
                    for (r, &v) in rows.iter().enumerate() {
                        if self.rg(v) {
                            self.acc(&mut adj, v, Tensor::vector(g.row(r).to_vec()));
                        }
                    }
                }
                Op::Sum(x) => {
                    let d = Tensor::filled(self.value(*x).shape(), g.item());
                    self.acc(&mut adj, *x, d);
                }
                Op::Dot(a, b) => {
                    let gv = g.item();
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        if self.rg(v) {
                            let d = tensor::map(self.value(other), |o| gv * o);
                            self.acc(&mut adj, v, d);
                        }
                    }
                }
                Op::Softmax(x, mask) => {
                    let y = node.value.as_ref().unwrap();
                    let cols = y.shape()[y.rank() - 1];
                    let mut d = vec![0.0; y.numel()];
                    for ((drow, yrow), (grow, keep)) in d
                        .chunks_mut(cols)
                        .zip(y.data().chunks(cols))
                        .zip(g.data().chunks(cols).zip(mask.chunks(cols)))
                    {
                        let inner: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            if keep[j] {
                                drow[j] = yrow[j] * (grow[j] - inner);
                            }
                        }
                    }
                    let d = Tensor::new(y.shape().to_vec(), d).unwrap();
                    self.acc(&mut adj, *x, d);
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.as_ref().unwrap();
                    let total: f64 = g.data().iter().sum();
                    let d = tensor::zip_broadcast("log_softmax", &g, y, |gv, yv| gv - yv.exp() * total)
                        .unwrap();
                    self.acc(&mut adj, *x, d);
                }
                Op::Pick(x, idx) => {
                    let mut d = Tensor::zeros(self.value(*x).shape());
                    d.data_mut()[*idx] = g.item();
                    self.acc(&mut adj, *x, d);
                }
            }
        }
        Ok(grads)
    }

    fn acc(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a broadcast gradient back down to a scalar operand's shape.
    fn reduce_broadcast(&self, v: Var, g: Tensor) -> Tensor {
        let shape = self.value(v).shape();
        if g.shape() == shape {
            g
        } else {
            Tensor::scalar(g.data().iter().sum())
        }
    }

    fn scatter_rows(
        &self,
        adj: &mut [Option<Tensor>],
        grads: &mut Gradients,
        table: Var,
        idx: &[usize],
        g: &Tensor,
    ) {
        if !self.rg(table) {
            return;
        }
        let shape = self.value(table).shape().to_vec();
        let cols = shape[1];
        let add_rows = |acc: &mut Tensor| {
            for (k, &r) in idx.iter().enumerate() {
                let src = &g.data()[k * cols..(k + 1) * cols];
                for (d, s) in acc.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                    *d += s;
                }
            }
        };
        // Parameter tables receive rows directly instead of a dense temporary.
        if let Op::Param(id) = self.nodes[table.0].op {
            let slot = &mut grads.params[id.0];
            add_rows(slot.get_or_insert_with(|| Tensor::zeros(&shape)));
        } else {
            add_rows(adj[table.0].get_or_insert_with(|| Tensor::zeros(&shape)));
        }
    }
}

impl Gradients {
    /// Gradient with respect to a tracked leaf, if it participated.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new(&store);
        let xv = tape.param(x).unwrap();
        let y = tape.hadamard(xv, xv).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(grads.param(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_loss_gives_no_gradients() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new(&store);
        let c = tape.constant(Tensor::scalar(2.0));
        let grads = tape.backward(c).unwrap();
        drop(tape);
        assert!(grads.param(x).is_none());
        store.accumulate(&grads);
        assert_eq!(store.grad(x).item(), 0.0);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::detached();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(NumericError::NotScalar(_))));
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(NumericError::TapeConsumed)));
    }

    #[test]
    fn unused_params_keep_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let b = store.add("b", Tensor::vector(vec![5.0, 6.0])).unwrap();
        let mut tape = Tape::new(&store);
        let av = tape.param(a).unwrap();
        let loss = tape.sum(av);
        let grads = tape.backward(loss).unwrap();
        drop(tape);
        store.accumulate(&grads);
        assert_eq!(store.grad(a).data(), &[1.0, 1.0]);
        assert_eq!(store.grad(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut tape = Tape::detached();
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let y = tape.tanh(x);
        let z = tape.add(x, y).unwrap();
        let w = tape.hadamard(z, y).unwrap();
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        let t = 2f64.tanh();
        let dt = 1.0 - t * t;
        // d/dx[(x + tanh x) tanh x]
        let expect = (1.0 + dt) * t + (2.0 + t) * dt;
        assert!((g.wrt(x).unwrap().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn truncate_forgets_param_nodes() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::new(&store);
        let mark = tape.len();
        let v1 = tape.param(a).unwrap();
        tape.truncate(mark);
        let v2 = tape.param(a).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(tape.len(), 1);
    }
}
