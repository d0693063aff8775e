//! Tensor-level Wengert list.
//!
//! Every primitive's vector-Jacobian product is itself written with tape
//! primitives, so a backward sweep appends ordinary nodes to the same tape.
//! Sweeping backward a second time over those nodes yields Hessian-vector
//! products (double reverse).

use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Tanh(Var),
    /// Mask of the positive inputs is a constant node.
    Relu(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    BroadcastScalar(Var),
    /// m x n -> 1 x n
    SumRows(Var),
    /// 1 x n -> m x n
    BroadcastRows(Var),
    /// m x n -> m x 1
    SumCols(Var),
    /// m x 1 -> m x n
    BroadcastCols(Var),
    Softmax(Var),
    SoftmaxCrossEntropy(Var, Rc<[usize]>),
    Reshape(Var),
    /// Contiguous flat range starting at the offset.
    Slice(Var, usize),
    /// Places the input at the offset inside a zero tensor.
    Embed(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    /// Adds input row i into output row idx[i].
    ScatterRows(Var, Rc<[usize]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Recip(..) => "recip",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
            Op::Reshape(..) => "reshape",
            Op::Slice(..) => "slice",
            Op::Embed(..) => "embed",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any differentiable leaf feeds this node.
    active: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn row_softmax(x: &Tensor) -> Tensor {
    let (m, n) = x.shape();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = &x.data()[i * n..(i + 1) * n];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    Tensor::new(m, n, out)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn is_active(&self, v: Var) -> bool {
        self.nodes[v.0].active
    }

    fn push(&mut self, value: Tensor, op: Op, active: bool) -> Var {
        self.nodes.push(Node { value, op, active });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that gradients never flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let active = self.is_active(a);
        self.push(value, op, active)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let active = self.is_active(a) || self.is_active(b);
        self.push(value, op, active)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.unary(a, v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.unary(a, v, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.unary(a, v, Op::Recip(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    /// Subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let v = self.value(a).map(|x| x.max(0.0));
        let mask = self.constant(mask);
        self.unary(a, v, Op::Relu(a, mask))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul: inner dimensions differ");
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.unary(a, v, Op::Transpose(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.shape(a), (1, 1), "broadcast_scalar: input must be 1x1");
        let v = Tensor::filled(rows, cols, self.value(a).item());
        self.unary(a, v, Op::BroadcastScalar(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        self.unary(a, Tensor::new(1, n, out), Op::SumRows(a))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let (r, n) = self.shape(a);
        assert_eq!(r, 1, "broadcast_rows: input must be a row");
        let row = self.value(a).data();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(row);
        }
        self.unary(a, Tensor::new(rows, n, out), Op::BroadcastRows(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let x = self.value(a).data();
        let out = (0..m).map(|i| x[i * n..(i + 1) * n].iter().sum()).collect();
        self.unary(a, Tensor::new(m, 1, out), Op::SumCols(a))
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let (m, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_cols: input must be a column");
        let col = self.value(a).data();
        let mut out = Vec::with_capacity(m * cols);
        for &v in col {
            out.extend(std::iter::repeat_n(v, cols));
        }
        self.unary(a, Tensor::new(m, cols, out), Op::BroadcastCols(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = row_softmax(self.value(a));
        self.unary(a, v, Op::Softmax(a))
    }

    /// Mean over rows of `logsumexp(logits_i) - logits_i[label_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Rc<[usize]>) -> Var {
        let (m, n) = self.shape(logits);
        assert_eq!(m, labels.len(), "softmax_cross_entropy: one label per row");
        assert!(m > 0, "softmax_cross_entropy: empty batch");
        let x = self.value(logits).data();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            assert!(label < n, "softmax_cross_entropy: label {label} out of range");
            let row = &x[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let v = Tensor::scalar(total / m as f64);
        self.unary(logits, v, Op::SoftmaxCrossEntropy(logits, labels))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).reshaped(rows, cols);
        self.unary(a, v, Op::Reshape(a))
    }

    /// Flat elements `offset..offset + rows*cols`, shaped `rows x cols`.
    pub fn slice(&mut self, a: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let src = self.value(a).data();
        assert!(offset + rows * cols <= src.len(), "slice: range out of bounds");
        let v = Tensor::new(rows, cols, src[offset..offset + rows * cols].to_vec());
        self.unary(a, v, Op::Slice(a, offset))
    }

    /// Zero tensor of `rows x cols` with `a`'s flat data written at `offset`.
    pub fn embed(&mut self, a: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let src = self.value(a).data();
        assert!(offset + src.len() <= rows * cols, "embed: range out of bounds");
        let mut out = vec![0.0; rows * cols];
        out[offset..offset + src.len()].copy_from_slice(src);
        self.unary(a, Tensor::new(rows, cols, out), Op::Embed(a, offset))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let (m, n) = self.shape(a);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            assert!(i < m, "gather_rows: row {i} out of range");
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let v = Tensor::new(idx.len(), n, out);
        self.unary(a, v, Op::GatherRows(a, idx))
    }

    pub fn scatter_rows(&mut self, a: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(m, idx.len(), "scatter_rows: one index per row");
        let x = self.value(a).data();
        let mut out = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&x[r * n..(r + 1) * n]) {
                *o += v;
            }
        }
        self.unary(a, Tensor::new(rows, n, out), Op::ScatterRows(a, idx))
    }

    /// `sum(a * b)`
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum(p)
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, contribution: Var) {
        if !self.is_active(target) {
            return;
        }
        adj[target.0] = Some(match adj[target.0] {
            None => contribution,
            Some(prev) => self.add(prev, contribution),
        });
    }

    /// Reverse sweep from the scalar `output`, recording every adjoint
    /// computation on this tape. Returns one adjoint per entry of `wrt`
    /// (a constant zero node when `output` does not depend on it).
    pub fn backward(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.shape(output), (1, 1), "backward: output must be a scalar");
        let mut adj: Vec<Option<Var>> = vec![None; output.0 + 1];
        if self.is_active(output) {
            let seed = self.constant(Tensor::scalar(1.0));
            adj[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !self.nodes[i].active {
                continue;
            }
            let y = Var(i);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g);
                    if self.is_active(b) {
                        let nb = self.neg(g);
                        self.accumulate(&mut adj, b, nb);
                    }
                }
                Op::Mul(a, b) => {
                    if self.is_active(a) {
                        let ga = self.mul(g, b);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if self.is_active(b) {
                        let gb = self.mul(g, a);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::AddScalar(a) => self.accumulate(&mut adj, a, g),
                Op::Exp(a) => {
                    let ga = self.mul(g, y);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Log(a) => {
                    let r = self.recip(a);
                    let ga = self.mul(g, r);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Recip(a) => {
                    let yy = self.mul(y, y);
                    let t = self.mul(g, yy);
                    let ga = self.neg(t);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Tanh(a) => {
                    let yy = self.mul(y, y);
                    let nyy = self.neg(yy);
                    let d = self.add_scalar(nyy, 1.0);
                    let ga = self.mul(g, d);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Relu(a, mask) => {
                    let ga = self.mul(g, mask);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::MatMul(a, b) => {
                    if self.is_active(a) {
                        let bt = self.transpose(b);
                        let ga = self.matmul(g, bt);
                        self.accumulate(&mut adj, a, ga);
                    }
                    if self.is_active(b) {
                        let at = self.transpose(a);
                        let gb = self.matmul(at, g);
                        self.accumulate(&mut adj, b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    let ga = self.broadcast_scalar(g, r, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastScalar(a) => {
                    let ga = self.sum(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumRows(a) => {
                    let r = self.shape(a).0;
                    let ga = self.broadcast_rows(g, r);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastRows(a) => {
                    let ga = self.sum_rows(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SumCols(a) => {
                    let c = self.shape(a).1;
                    let ga = self.broadcast_cols(g, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::BroadcastCols(a) => {
                    let ga = self.sum_cols(g);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Softmax(a) => {
                    // y * (g - rowsum(g * y))
                    let c = self.shape(a).1;
                    let gy = self.mul(g, y);
                    let s = self.sum_cols(gy);
                    let sb = self.broadcast_cols(s, c);
                    let diff = self.sub(g, sb);
                    let ga = self.mul(y, diff);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::SoftmaxCrossEntropy(a, labels) => {
                    // g * (softmax(a) - onehot) / m
                    let (m, n) = self.shape(a);
                    let mut onehot = vec![0.0; m * n];
                    for (i, &l) in labels.iter().enumerate() {
                        onehot[i * n + l] = 1.0;
                    }
                    let onehot = self.constant(Tensor::new(m, n, onehot));
                    let p = self.softmax(a);
                    let d = self.sub(p, onehot);
                    let d = self.scale(d, 1.0 / m as f64);
                    let gb = self.broadcast_scalar(g, m, n);
                    let ga = self.mul(gb, d);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(a);
                    let ga = self.reshape(g, r, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Slice(a, offset) => {
                    let (r, c) = self.shape(a);
                    let ga = self.embed(g, offset, r, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Embed(a, offset) => {
                    let (r, c) = self.shape(a);
                    let ga = self.slice(g, offset, r, c);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let r = self.shape(a).0;
                    let ga = self.scatter_rows(g, idx, r);
                    self.accumulate(&mut adj, a, ga);
                }
                Op::ScatterRows(a, idx) => {
                    let ga = self.gather_rows(g, idx);
                    self.accumulate(&mut adj, a, ga);
                }
            }
        }
        wrt.iter()
            .map(|&v| match adj.get(v.0).copied().flatten() {
                Some(a) => a,
                None => {
                    let (r, c) = self.shape(v);
                    self.constant(Tensor::zeros(r, c))
                }
            })
            .collect()
    }

    /// First node holding a non-finite value, with its operation name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| n.value.data().iter().any(|x| !x.is_finite()))
            .map(|i| (i, self.nodes[i].op.name()))
    }

    /// Errors with node provenance if `v` or anything before it is non-finite.
    pub fn check_finite(&self, vars: &[Var]) -> Result<()> {
        if vars.iter().all(|&v| self.value(v).data().iter().all(|x| x.is_finite())) {
            return Ok(());
        }
        let (node, op) = self.first_non_finite().expect("a checked value is non-finite");
        Err(Error::NonFinite { node, op })
    }

    #[cfg(test)]
    pub(crate) fn parents_precede_children(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| {
            let parents: Vec<Var> = match &n.op {
                Op::Leaf => vec![],
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Relu(a, b) => vec![*a, *b],
                Op::Neg(a)
                | Op::Scale(a, _)
                | Op::AddScalar(a)
                | Op::Exp(a)
                | Op::Log(a)
                | Op::Recip(a)
                | Op::Tanh(a)
                | Op::Transpose(a)
                | Op::Sum(a)
                | Op::BroadcastScalar(a)
                | Op::SumRows(a)
                | Op::BroadcastRows(a)
                | Op::SumCols(a)
                | Op::BroadcastCols(a)
                | Op::Softmax(a)
                | Op::SoftmaxCrossEntropy(a, _)
                | Op::Reshape(a)
                | Op::Slice(a, _)
                | Op::Embed(a, _)
                | Op::GatherRows(a, _)
                | Op::ScatterRows(a, _) => vec![*a],
            };
            parents.iter().all(|p| p.0 < i)
        })
    }
}
