//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every value on the tape is a matrix (rank-0 and rank-1 inputs are viewed
//! as `1×1` and `1×n`). Binary elementwise ops broadcast an operand along any
//! axis where its extent is 1. A tape lives for one batch: build the forward
//! graph, read the values you need, then consume it with [`Tape::backward`].

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::sparse::CsrMatrix;
use crate::tensor::{gemm, Tensor};

/// Lower clamp applied to `log` arguments.
pub const LOG_FLOOR: f64 = 1e-12;

/// Rows with an L2 norm below this are treated as zero rows.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Concat(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sigmoid(Var),
    Silu(Var),
    Log(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    Gather { table: Var, idx: Arc<[usize]> },
    SpMM { m: Arc<CsrMatrix>, x: Var },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Dot(Var, Var),
    Mse(Var, Var),
    Reshape(Var),
    Transpose(Var),
    PickPerRow { x: Var, cols: Arc<[usize]> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    bound: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients with respect to every tape node reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            bound: HashMap::new(),
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input. Gradients never flow into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter onto the tape. Repeated calls return the
    /// same node, so gradients from every use are summed.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: self.grad_enabled && p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Copies a value into a fresh constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            &mut out,
            0.0,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    /// Multiplies a constant sparse matrix with `x`.
    pub fn spmm(&mut self, m: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let value = m.matmul_dense(self.value(x))?;
        Ok(self.push(value, Op::SpMM { m: Arc::clone(m), x }, &[x]))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `scale·x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x), &[x])
    }

    /// Natural log with the argument clamped at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        self.push(value, Op::Log(x), &[x])
    }

    // ---- row-wise ----

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (r, c) = src.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = src.row(i);
            let lse = log_sum_exp(row);
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let value = Tensor::matrix(r, c, out).expect("same dims");
        self.push(value, Op::LogSoftmaxRows(x), &[x])
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (r, c) = src.dims2();
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = src.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > NORM_FLOOR {
                for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let value = Tensor::matrix(r, c, out).expect("same dims");
        self.push(value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.dims(p).0,
            None => return Err(Error::invalid("concat of zero tensors")),
        };
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat", self.shape(parts[0]), self.shape(p)));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(rows, total, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, _) = self.dims(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", self.shape(table), &[bad]));
        }
        let value = self.value(table).select_rows(idx);
        Ok(self.push(value, Op::Gather { table, idx: idx.into() }, &[table]))
    }

    /// Picks one column per row, giving a `rows×1` column.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::shape("pick_per_row", self.shape(x), &[cols.len()]));
        }
        let src = self.value(x);
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| src.get(i, j)).collect();
        let value = Tensor::column(out);
        Ok(self.push(value, Op::PickPerRow { x, cols: cols.into() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Sums along the last axis, giving a `rows×1` column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let value = Tensor::column(out);
        self.push(value, Op::SumCols(x), &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(Error::shape("dot", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mse", ta.shape(), tb.shape()));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.numel().max(1) as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    fn broadcast_binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let (ar, ac) = ta.dims2();
        let (br, bc) = tb.dims2();
        let (r, c) = broadcast_dims(ar, ac, br, bc).ok_or_else(|| Error::shape(op, ta.shape(), tb.shape()))?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = ta.data()[bidx(i, j, ar, ac)];
                let y = tb.data()[bidx(i, j, br, bc)];
                out.push(f(x, y));
            }
        }
        Tensor::matrix(r, c, out)
    }

    /// Runs reverse accumulation from a scalar `loss`, adds parameter
    /// gradients into `store` and returns gradients for all reached nodes.
    /// The tape is consumed.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads)?;
            if let Op::Param(id) = node.op {
                store.accumulate_grad(id, &g)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(a), val(b));
            let (m, n) = g.dims2();
            let k = if ta { av.rows() } else { av.cols() };
            if needs(a) {
                // dA = G·Bᵀ (or its transpose when A was used transposed)
                let mut da = vec![0.0; m * k];
                if ta {
                    // stored A is k×m: dA_stored = B·Gᵀ  (k×n · n×m)
                    gemm(k, n, m, bv.data(), tb, g.data(), true, &mut da, 0.0);
                } else {
                    gemm(m, n, k, g.data(), false, bv.data(), !tb, &mut da, 0.0);
                }
                accumulate(grads, nodes, a, Tensor::new(av.shape().to_vec(), da)?);
            }
            if needs(b) {
                let mut db = vec![0.0; k * n];
                if tb {
                    // stored B is n×k: dB_stored = Gᵀ·A  (n×m · m×k)
                    gemm(n, m, k, g.data(), true, av.data(), ta, &mut db, 0.0);
                } else {
                    gemm(k, m, n, av.data(), !ta, g.data(), false, &mut db, 0.0);
                }
                accumulate(grads, nodes, b, Tensor::new(bv.shape().to_vec(), db)?);
            }
        }
        &Op::Transpose(x) => {
            let t = g.transpose().reshape(val(x).shape().to_vec())?;
            accumulate(grads, nodes, x, t);
        }
        &Op::Add(a, b) => {
            if needs(a) {
                accumulate(grads, nodes, a, reduce_to(g, val(a), |gi, _| gi));
            }
            if needs(b) {
                accumulate(grads, nodes, b, reduce_to(g, val(b), |gi, _| gi));
            }
        }
        &Op::Sub(a, b) => {
            if needs(a) {
                accumulate(grads, nodes, a, reduce_to(g, val(a), |gi, _| gi));
            }
            if needs(b) {
                accumulate(grads, nodes, b, reduce_to(g, val(b), |gi, _| -gi));
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (r, c) = g.dims2();
            let (ar, ac) = av.dims2();
            let (br, bc) = bv.dims2();
            if needs(a) {
                let mut ga = vec![0.0; av.numel()];
                for i in 0..r {
                    for j in 0..c {
                        ga[bidx(i, j, ar, ac)] += g.data()[i * c + j] * bv.data()[bidx(i, j, br, bc)];
                    }
                }
                accumulate(grads, nodes, a, Tensor::new(av.shape().to_vec(), ga)?);
            }
            if needs(b) {
                let mut gb = vec![0.0; bv.numel()];
                for i in 0..r {
                    for j in 0..c {
                        gb[bidx(i, j, br, bc)] += g.data()[i * c + j] * av.data()[bidx(i, j, ar, ac)];
                    }
                }
                accumulate(grads, nodes, b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
        }
        &Op::Affine { x, scale } => {
            accumulate(grads, nodes, x, g.map(|v| v * scale));
        }
        Op::Concat(parts) => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                if needs(p) {
                    let mut gp = Vec::with_capacity(rows * c);
                    for i in 0..rows {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    accumulate(grads, nodes, p, Tensor::new(val(p).shape().to_vec(), gp)?);
                }
                offset += c;
            }
        }
        &Op::SoftmaxRows(x) => {
            let y = &node.value;
            let (r, c) = y.dims2();
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let (yr, gr) = (y.row(i), g.row(i));
                let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[i * c + j] = yr[j] * (gr[j] - inner);
                }
            }
            accumulate(grads, nodes, x, Tensor::new(val(x).shape().to_vec(), gx)?);
        }
        &Op::LogSoftmaxRows(x) => {
            let y = &node.value;
            let (r, c) = y.dims2();
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let (yr, gr) = (y.row(i), g.row(i));
                let total: f64 = gr.iter().sum();
                for j in 0..c {
                    gx[i * c + j] = gr[j] - yr[j].exp() * total;
                }
            }
            accumulate(grads, nodes, x, Tensor::new(val(x).shape().to_vec(), gx)?);
        }
        &Op::Sigmoid(x) => {
            let y = &node.value;
            let data = y
                .data()
                .iter()
                .zip(g.data())
                .map(|(s, gi)| gi * s * (1.0 - s))
                .collect();
            accumulate(grads, nodes, x, Tensor::new(y.shape().to_vec(), data)?);
        }
        &Op::Silu(x) => {
            let xv = val(x);
            let data = xv
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, gi)| {
                    let s = sigmoid(v);
                    gi * (s + v * s * (1.0 - s))
                })
                .collect();
            accumulate(grads, nodes, x, Tensor::new(xv.shape().to_vec(), data)?);
        }
        &Op::Log(x) => {
            let xv = val(x);
            let data = xv
                .data()
                .iter()
                .zip(g.data())
                .map(|(&v, gi)| if v > LOG_FLOOR { gi / v } else { 0.0 })
                .collect();
            accumulate(grads, nodes, x, Tensor::new(xv.shape().to_vec(), data)?);
        }
        Op::L2NormalizeRows { x, norms } => {
            let y = &node.value;
            let (r, c) = y.dims2();
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                if norms[i] <= NORM_FLOOR {
                    continue;
                }
                let (yr, gr) = (y.row(i), g.row(i));
                let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[i * c + j] = (gr[j] - yr[j] * inner) / norms[i];
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(val(*x).shape().to_vec(), gx)?);
        }
        Op::Gather { table, idx } => {
            let tv = val(*table);
            let c = tv.cols();
            let mut gt = vec![0.0; tv.numel()];
            for (r, &i) in idx.iter().enumerate() {
                for (d, s) in gt[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                    *d += s;
                }
            }
            accumulate(grads, nodes, *table, Tensor::new(tv.shape().to_vec(), gt)?);
        }
        Op::SpMM { m, x } => {
            let gx = m.transpose_matmul_dense(g).reshape(val(*x).shape().to_vec())?;
            accumulate(grads, nodes, *x, gx);
        }
        &Op::Sum(x) => {
            let gi = g.item();
            accumulate(grads, nodes, x, Tensor::full(val(x).shape(), gi));
        }
        &Op::Mean(x) => {
            let n = val(x).numel().max(1) as f64;
            accumulate(grads, nodes, x, Tensor::full(val(x).shape(), g.item() / n));
        }
        &Op::SumCols(x) => {
            let xv = val(x);
            let (r, c) = xv.dims2();
            let mut gx = Vec::with_capacity(r * c);
            for i in 0..r {
                gx.extend(std::iter::repeat_n(g.data()[i], c));
            }
            accumulate(grads, nodes, x, Tensor::new(xv.shape().to_vec(), gx)?);
        }
        &Op::Dot(a, b) => {
            let gi = g.item();
            if needs(a) {
                accumulate(
                    grads,
                    nodes,
                    a,
                    val(b).map(|v| v * gi).reshape(val(a).shape().to_vec())?,
                );
            }
            if needs(b) {
                accumulate(
                    grads,
                    nodes,
                    b,
                    val(a).map(|v| v * gi).reshape(val(b).shape().to_vec())?,
                );
            }
        }
        &Op::Mse(a, b) => {
            let (av, bv) = (val(a), val(b));
            let scale = 2.0 * g.item() / av.numel().max(1) as f64;
            let diff: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| scale * (x - y)).collect();
            if needs(a) {
                accumulate(grads, nodes, a, Tensor::new(av.shape().to_vec(), diff.clone())?);
            }
            if needs(b) {
                let neg = diff.into_iter().map(|v| -v).collect();
                accumulate(grads, nodes, b, Tensor::new(bv.shape().to_vec(), neg)?);
            }
        }
        &Op::Reshape(x) => {
            accumulate(grads, nodes, x, g.clone().reshape(val(x).shape().to_vec())?);
        }
        Op::PickPerRow { x, cols } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut gx = vec![0.0; xv.numel()];
            for (i, &j) in cols.iter().enumerate() {
                gx[i * c + j] += g.data()[i];
            }
            accumulate(grads, nodes, *x, Tensor::new(xv.shape().to_vec(), gx)?);
        }
    }
    Ok(())
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: &Tensor, operand: &Tensor, f: impl Fn(f64, usize) -> f64) -> Tensor {
    if g.shape() == operand.shape() {
        return Tensor::new(
            operand.shape().to_vec(),
            g.data().iter().enumerate().map(|(i, &v)| f(v, i)).collect(),
        )
        .expect("same shape");
    }
    let (r, c) = g.dims2();
    let (or, oc) = operand.dims2();
    let mut out = vec![0.0; operand.numel()];
    for i in 0..r {
        for j in 0..c {
            let k = bidx(i, j, or, oc);
            out[k] += f(g.data()[i * c + j], k);
        }
    }
    Tensor::new(operand.shape().to_vec(), out).expect("operand shape")
}

fn broadcast_dims(ar: usize, ac: usize, br: usize, bc: usize) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(ar, br)?, dim(ac, bc)?))
}

#[inline]
fn bidx(i: usize, j: usize, r: usize, c: usize) -> usize {
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
