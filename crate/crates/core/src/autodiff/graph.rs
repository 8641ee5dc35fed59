//! Dynamic computation record for reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its forward value, so nodes are already in topological
//! order and [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Inputs to `log` are clamped to this floor.
pub const LOG_FLOOR: f64 = 1e-12;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Sigmoid,
    Tanh,
    /// Natural log with the input clamped to [`LOG_FLOOR`].
    Log,
    Exp,
    /// User supplied rule: `f(x)` and `df(x, f(x))`.
    Custom {
        f: fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    },
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Log => x.max(LOG_FLOOR).ln(),
            Unary::Exp => x.exp(),
            Unary::Custom { f, .. } => f(x),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Log => {
                if x >= LOG_FLOOR {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Custom { df, .. } => df(x, y),
        }
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

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Concat(Vec<usize>),
    Stack(Vec<usize>),
    Slice { input: usize, start: usize, len: usize },
    Unary(usize, Unary),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    AddN(Vec<usize>),
    Gather { table: usize, rows: Vec<usize> },
    Reshape(usize),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    trainable: bool,
}

/// Append-only record of operations and their forward values.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of `v`.
    ///
    /// Panics if `v` belongs to another graph.
    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable belongs to a different graph");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            trainable: false,
        });
        Var { graph: self.id, index }
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Trainable leaf; always present in the gradient map after backward.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.index].trainable = true;
        v
    }

    /// Binds a stored parameter as a trainable leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&index) = self.bound.get(&id) {
            return Var { graph: self.id, index };
        }
        let v = self.variable(store.value(id).clone());
        self.bound.insert(id, v.index);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &index)| (id, Var { graph: self.id, index }))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Matrix product. A rank-1 left operand is a row vector and the result
    /// is rank 1 as well.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let (m, k, vec_out) = lhs_dims(ta).ok_or_else(|| Error::shape("matmul", ta.shape(), tb.shape()))?;
        if tb.rank() != 2 || tb.shape()[0] != k {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let n = tb.shape()[1];
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let shape = if vec_out { vec![n] } else { vec![m, n] };
        Ok(self.push(Op::MatMul(ia, ib), Tensor::from_parts(shape, out)))
    }

    /// `a · bᵀ` with `b` of shape `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let (m, k, vec_out) = lhs_dims(ta).ok_or_else(|| Error::shape("matmul_t", ta.shape(), tb.shape()))?;
        if tb.rank() != 2 || tb.shape()[1] != k {
            return Err(Error::shape("matmul_t", ta.shape(), tb.shape()));
        }
        let n = tb.shape()[0];
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bd[j * k..(j + 1) * k]);
            }
        }
        let shape = if vec_out { vec![n] } else { vec![m, n] };
        Ok(self.push(Op::MatMulT(ia, ib), Tensor::from_parts(shape, out)))
    }

    /// Elementwise sum; `b` may also be a rank-1 row broadcast over the
    /// leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() == tb.shape() {
            let data = zip_map(ta.data(), tb.data(), |x, y| x + y);
            let shape = ta.shape().to_vec();
            return Ok(self.push(Op::Add(ia, ib), Tensor::from_parts(shape, data)));
        }
        if tb.rank() == 1 && ta.rank() >= 1 && ta.last_dim() == tb.numel() {
            let w = tb.numel();
            let bd = tb.data();
            let data: Vec<f64> = ta.data().iter().enumerate().map(|(i, &x)| x + bd[i % w]).collect();
            let shape = ta.shape().to_vec();
            return Ok(self.push(Op::AddRow(ia, ib), Tensor::from_parts(shape, data)));
        }
        Err(Error::shape("add", ta.shape(), tb.shape()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("sub", ta.shape(), tb.shape()));
        }
        let data = zip_map(ta.data(), tb.data(), |x, y| x - y);
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::Sub(ia, ib), Tensor::from_parts(shape, data)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = zip_map(ta.data(), tb.data(), |x, y| x * y);
        let shape = ta.shape().to_vec();
        Ok(self.push(Op::Mul(ia, ib), Tensor::from_parts(shape, data)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let data = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Scale(ia, factor), Tensor::from_parts(shape, data)))
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let data = t.data().iter().map(|x| x + c).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Offset(ia), Tensor::from_parts(shape, data)))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.offset(neg, 1.0)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.val(ids[0]);
        let lead = &first.shape()[..first.rank().saturating_sub(1)];
        let outer = first.outer();
        let mut width = 0;
        for &i in &ids {
            let t = self.val(i);
            if t.rank() == 0 || &t.shape()[..t.rank() - 1] != lead {
                return Err(Error::shape("concat", first.shape(), t.shape()));
            }
            width += t.last_dim();
        }
        let mut data = Vec::with_capacity(outer * width);
        for r in 0..outer {
            for &i in &ids {
                data.extend_from_slice(self.val(i).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Ok(self.push(Op::Concat(ids), Tensor::from_parts(shape, data)))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("stack", "no inputs"));
        }
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let inner = self.val(ids[0]).shape().to_vec();
        let mut data = Vec::with_capacity(ids.len() * self.val(ids[0]).numel());
        for &i in &ids {
            let t = self.val(i);
            if t.shape() != inner.as_slice() {
                return Err(Error::shape("stack", &inner, t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![ids.len()];
        shape.extend_from_slice(&inner);
        Ok(self.push(Op::Stack(ids), Tensor::from_parts(shape, data)))
    }

    /// `len` entries of the last axis starting at `start`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let w = t.last_dim();
        if t.rank() == 0 || len == 0 || start + len > w {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} outside last axis of {:?}", start + len, t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(t.outer() * len);
        for r in 0..t.outer() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Op::Slice { input: ia, start, len }, Tensor::from_parts(shape, data)))
    }

    /// Element `i` of a rank-1 tensor, as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        if self.value(a).rank() != 1 {
            return Err(Error::invalid("pick", format!("expected rank 1, got {:?}", self.shape(a))));
        }
        let s = self.slice(a, i, 1)?;
        self.reshape(s, Vec::new())
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        let data = t.data().iter().map(|&x| kind.apply(x)).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Unary(ia, kind), Tensor::from_parts(shape, data)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    /// Clamped natural log.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        if t.rank() == 0 {
            return Err(Error::invalid("softmax", "scalar input"));
        }
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..t.outer() {
            data.extend(softmax_row(t.row(r)));
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Op::Softmax(ia), Tensor::from_parts(shape, data)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.val(ia);
        if t.rank() == 0 {
            return Err(Error::invalid("log_softmax", "scalar input"));
        }
        let mut data = Vec::with_capacity(t.numel());
        for r in 0..t.outer() {
            let row = t.row(r);
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|x| x - lse));
        }
        let shape = t.shape().to_vec();
        Ok(self.push(Op::LogSoftmax(ia), Tensor::from_parts(shape, data)))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.val(ia).sum();
        Ok(self.push(Op::Sum(ia), Tensor::scalar(s)))
    }

    /// Elementwise sum of many equally shaped tensors.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("add_n", "no inputs"));
        }
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let shape = self.val(ids[0]).shape().to_vec();
        let mut data = vec![0.0; self.val(ids[0]).numel()];
        for &i in &ids {
            let t = self.val(i);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("add_n", &shape, t.shape()));
            }
            for (d, x) in data.iter_mut().zip(t.data()) {
                *d += x;
            }
        }
        Ok(self.push(Op::AddN(ids), Tensor::from_parts(shape, data)))
    }

    /// Row lookup. For a `[V, D]` table the result is `[rows.len(), D]`;
    /// for a rank-1 table it is `[rows.len()]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let t = self.val(it);
        if rows.is_empty() {
            return Err(Error::invalid("gather", "no rows requested"));
        }
        let (count, width) = match t.rank() {
            1 => (t.numel(), 1),
            2 => (t.shape()[0], t.shape()[1]),
            _ => return Err(Error::invalid("gather", format!("table must be rank 1 or 2, got {:?}", t.shape()))),
        };
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= count {
                return Err(Error::invalid("gather", format!("row {r} out of range for {:?}", t.shape())));
            }
            data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let shape = if t.rank() == 1 { vec![rows.len()] } else { vec![rows.len(), width] };
        Ok(self.push(
            Op::Gather {
                table: it,
                rows: rows.to_vec(),
            },
            Tensor::from_parts(shape, data),
        ))
    }

    /// Single row of a `[V, D]` table as a rank-1 `[D]` tensor.
    pub fn gather_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let g = self.gather(table, &[row])?;
        let w = self.value(g).last_dim();
        self.reshape(g, vec![w])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.val(ia).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(ia), value))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.idx(output)?;
        if self.val(out).numel() != 1 {
            return Err(Error::NonScalarOutput(self.val(out).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out] = Some(vec![1.0]);
        for i in (0..=out).rev() {
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            graph: self.id,
            shapes: self.nodes[..=out].iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            trainable: self.nodes.iter().map(|n| n.trainable).collect(),
        })
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, _) = lhs_dims(ta).expect("checked in forward");
                let n = tb.shape()[1];
                let (ad, bd) = (ta.data(), tb.data());
                {
                    let ga = acc(grads, *a, m * k);
                    for r in 0..m {
                        let grow = &gout[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                let gb = acc(grads, *b, k * n);
                for r in 0..m {
                    let grow = &gout[r * n..(r + 1) * n];
                    for p in 0..k {
                        let av = ad[r * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (g, &go) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *g += av * go;
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, _) = lhs_dims(ta).expect("checked in forward");
                let n = tb.shape()[0];
                let (ad, bd) = (ta.data(), tb.data());
                {
                    let ga = acc(grads, *a, m * k);
                    for r in 0..m {
                        for j in 0..n {
                            let go = gout[r * n + j];
                            if go == 0.0 {
                                continue;
                            }
                            for (g, &bv) in ga[r * k..(r + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                *g += go * bv;
                            }
                        }
                    }
                }
                let gb = acc(grads, *b, n * k);
                for r in 0..m {
                    let arow = &ad[r * k..(r + 1) * k];
                    for j in 0..n {
                        let go = gout[r * n + j];
                        if go == 0.0 {
                            continue;
                        }
                        for (g, &av) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *g += go * av;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, gout.len()), gout, 1.0);
                add_into(acc(grads, *b, gout.len()), gout, 1.0);
            }
            Op::AddRow(a, b) => {
                add_into(acc(grads, *a, gout.len()), gout, 1.0);
                let w = self.val(*b).numel();
                let gb = acc(grads, *b, w);
                for (j, &g) in gout.iter().enumerate() {
                    gb[j % w] += g;
                }
            }
            Op::Sub(a, b) => {
                add_into(acc(grads, *a, gout.len()), gout, 1.0);
                add_into(acc(grads, *b, gout.len()), gout, -1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                {
                    let ga = acc(grads, *a, gout.len());
                    for ((g, &go), &bv) in ga.iter_mut().zip(gout).zip(bd) {
                        *g += go * bv;
                    }
                }
                let gb = acc(grads, *b, gout.len());
                for ((g, &go), &av) in gb.iter_mut().zip(gout).zip(ad) {
                    *g += go * av;
                }
            }
            Op::Scale(a, f) => add_into(acc(grads, *a, gout.len()), gout, *f),
            Op::Offset(a) | Op::Reshape(a) => add_into(acc(grads, *a, gout.len()), gout, 1.0),
            Op::Concat(ids) => {
                let width = node.value.last_dim();
                let outer = node.value.outer();
                let mut offset = 0;
                for &p in ids {
                    let w = self.val(p).last_dim();
                    let gp = acc(grads, p, outer * w);
                    for r in 0..outer {
                        let src = &gout[r * width + offset..r * width + offset + w];
                        add_into(&mut gp[r * w..(r + 1) * w], src, 1.0);
                    }
                    offset += w;
                }
            }
            Op::Stack(ids) => {
                let inner = self.val(ids[0]).numel();
                for (r, &p) in ids.iter().enumerate() {
                    add_into(acc(grads, p, inner), &gout[r * inner..(r + 1) * inner], 1.0);
                }
            }
            Op::Slice { input, start, len } => {
                let t = self.val(*input);
                let w = t.last_dim();
                let gi = acc(grads, *input, t.numel());
                for r in 0..t.outer() {
                    add_into(&mut gi[r * w + start..r * w + start + len], &gout[r * len..(r + 1) * len], 1.0);
                }
            }
            Op::Unary(a, kind) => {
                let x = self.val(*a).data();
                let y = node.value.data();
                let ga = acc(grads, *a, gout.len());
                for j in 0..gout.len() {
                    ga[j] += gout[j] * kind.derivative(x[j], y[j]);
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let w = y.last_dim();
                let ga = acc(grads, *a, y.numel());
                for r in 0..y.outer() {
                    let yr = y.row(r);
                    let gr = &gout[r * w..(r + 1) * w];
                    let s = dot(yr, gr);
                    for j in 0..w {
                        ga[r * w + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let w = y.last_dim();
                let ga = acc(grads, *a, y.numel());
                for r in 0..y.outer() {
                    let yr = y.row(r);
                    let gr = &gout[r * w..(r + 1) * w];
                    let s: f64 = gr.iter().sum();
                    for j in 0..w {
                        ga[r * w + j] += gr[j] - yr[j].exp() * s;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.val(*a).numel();
                for g in acc(grads, *a, n).iter_mut() {
                    *g += gout[0];
                }
            }
            Op::AddN(ids) => {
                for &p in ids {
                    add_into(acc(grads, p, gout.len()), gout, 1.0);
                }
            }
            Op::Gather { table, rows } => {
                let t = self.val(*table);
                let width = if t.rank() == 1 { 1 } else { t.shape()[1] };
                let gt = acc(grads, *table, t.numel());
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut gt[r * width..(r + 1) * width], &gout[k * width..(k + 1) * width], 1.0);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
    trainable: Vec<bool>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` did not participate.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        if v.graph != self.graph {
            return None;
        }
        let shape = self.shapes.get(v.index)?.clone();
        Some(match &self.grads[v.index] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Gradient entries for every trainable leaf, in record order.
    pub fn trainable(&self) -> Vec<(usize, Tensor)> {
        (0..self.shapes.len())
            .filter(|&i| self.trainable[i])
            .map(|i| {
                let v = Var { graph: self.graph, index: i };
                (i, self.wrt(v).expect("same graph"))
            })
            .collect()
    }

    /// Adds `scale * dL/dθ` into `out` for every parameter bound in `graph`.
    pub fn accumulate_params(&self, graph: &Graph, out: &mut ParamGrads, scale: f64) {
        debug_assert_eq!(graph.id, self.graph);
        for (&id, &index) in &graph.bound {
            if let Some(Some(g)) = self.grads.get(index) {
                out.add_slice(id, g, scale);
            }
        }
    }
}

fn lhs_dims(t: &Tensor) -> Option<(usize, usize, bool)> {
    match t.rank() {
        1 => Some((1, t.shape()[0], true)),
        2 => Some((t.shape()[0], t.shape()[1], false)),
        _ => None,
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
