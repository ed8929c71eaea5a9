//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value. A node only
//! links to its parents when at least one parent requires a gradient;
//! otherwise it is stored as a constant and is invisible to `backward`.
//! Nodes are appended in evaluation order, so the node list is always a
//! valid topological order and the graph cannot contain cycles.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

/// The primitive catalog. Attributes travel inside the variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    /// Multiply by a constant.
    Scale(f64),
    /// Add a constant.
    AddScalar(f64),
    MatMul,
    Transpose,
    Relu,
    Exp,
    Log,
    /// Elementwise power with a constant exponent.
    Powf(f64),
    /// Absolute value, with subgradient 0 at 0.
    Abs,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    /// Row-wise log-softmax of a matrix.
    LogSoftmax,
    SumAll,
    MeanAll,
    /// Reduce a `[B, d]` matrix over rows to `[1, d]`.
    SumRows,
    /// Reduce a `[B, d]` matrix over columns to `[B, 1]`.
    SumCols,
    /// Repeat a `[1, d]` (or `[d]`) row `rows` times.
    BroadcastRows(usize),
    /// Repeat a `[B, 1]` column `cols` times.
    BroadcastCols(usize),
    /// Stack inputs along the batch axis.
    Concat,
    /// Rows `start..end` along the batch axis.
    Slice(usize, usize),
    /// Identity forward; backward multiplies the incoming gradient by `-c`.
    GradReverse(f64),
    /// Euclidean norm of each row, `[B, d] -> [B, 1]`; subgradient 0 at 0.
    RowL2Norm,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Powf(_) => "powf",
            Primitive::Abs => "abs",
            Primitive::Softplus => "softplus",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::SumAll => "sum",
            Primitive::MeanAll => "mean",
            Primitive::SumRows => "sum_rows",
            Primitive::SumCols => "sum_cols",
            Primitive::BroadcastRows(_) => "broadcast_rows",
            Primitive::BroadcastCols(_) => "broadcast_cols",
            Primitive::Concat => "concat",
            Primitive::Slice(..) => "slice",
            Primitive::GradReverse(_) => "grad_reverse",
            Primitive::RowL2Norm => "row_l2_norm",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    /// `None` for leaves and constants.
    op: Option<(Primitive, Vec<usize>)>,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by node.
///
/// Only nodes that require a gradient *and* are reachable from the loss have
/// an entry; disconnected variables are absent rather than zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tape: u64,
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(&var.id)
    }

    pub fn contains(&self, var: Var) -> bool {
        self.get(var).is_some()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn mismatch(op: Primitive, shapes: &[&[usize]]) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn matrix_dims(op: Primitive, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(op, &[s])),
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Forward evaluation of one primitive on plain tensors.
fn evaluate(op: Primitive, xs: &[&Tensor]) -> Result<Tensor> {
    let arity = match op {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => Some(2),
        Primitive::Concat => None,
        _ => Some(1),
    };
    match arity {
        Some(n) if xs.len() != n => {
            return Err(Error::InvalidArgument(format!(
                "`{}` takes {n} inputs, got {}",
                op.name(),
                xs.len()
            )))
        }
        None if xs.is_empty() => {
            return Err(Error::InvalidArgument("`concat` needs at least one input".into()))
        }
        _ => {}
    }
    let a = xs[0];
    let unary = |f: &dyn Fn(f64) -> f64| Tensor::from_raw(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect());
    let out = match op {
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            let b = xs[1];
            if a.shape() != b.shape() {
                return Err(mismatch(op, &[a.shape(), b.shape()]));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Primitive::Add => |x, y| x + y,
                Primitive::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_raw(a.shape().to_vec(), data)
        }
        Primitive::Scale(c) => unary(&|v| v * c),
        Primitive::AddScalar(c) => unary(&|v| v + c),
        Primitive::MatMul => {
            let b = xs[1];
            let (m, k) = matrix_dims(op, a)?;
            let (k2, n) = matrix_dims(op, b)?;
            if k != k2 {
                return Err(mismatch(op, &[a.shape(), b.shape()]));
            }
            Tensor::from_raw(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
        }
        Primitive::Transpose => {
            let (r, c) = matrix_dims(op, a)?;
            Tensor::from_raw(vec![c, r], transpose_raw(a.data(), r, c))
        }
        Primitive::Relu => unary(&|v| v.max(0.0)),
        Primitive::Exp => unary(&f64::exp),
        Primitive::Log => unary(&f64::ln),
        Primitive::Powf(p) => unary(&|v| v.powf(p)),
        Primitive::Abs => unary(&f64::abs),
        Primitive::Softplus => unary(&softplus),
        Primitive::LogSoftmax => {
            let (r, c) = matrix_dims(op, a)?;
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let row = a.row(i);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                data.extend(row.iter().map(|v| v - lse));
            }
            Tensor::from_raw(vec![r, c], data)
        }
        Primitive::SumAll => Tensor::from_raw(vec![1], vec![a.data().iter().sum()]),
        Primitive::MeanAll => Tensor::from_raw(
            vec![1],
            vec![a.data().iter().sum::<f64>() / a.numel() as f64],
        ),
        Primitive::SumRows => {
            let (r, c) = matrix_dims(op, a)?;
            let mut data = vec![0.0; c];
            for i in 0..r {
                for (d, v) in data.iter_mut().zip(a.row(i)) {
                    *d += v;
                }
            }
            Tensor::from_raw(vec![1, c], data)
        }
        Primitive::SumCols => {
            let (r, _) = matrix_dims(op, a)?;
            Tensor::from_raw(vec![r, 1], (0..r).map(|i| a.row(i).iter().sum()).collect())
        }
        Primitive::BroadcastRows(rows) => {
            let c = match a.shape() {
                [c] => *c,
                [1, c] => *c,
                s => return Err(mismatch(op, &[s])),
            };
            if rows == 0 {
                return Err(Error::InvalidArgument("broadcast to zero rows".into()));
            }
            let data = (0..rows).flat_map(|_| a.data().iter().copied()).collect();
            Tensor::from_raw(vec![rows, c], data)
        }
        Primitive::BroadcastCols(cols) => {
            let r = match a.shape() {
                [r, 1] => *r,
                s => return Err(mismatch(op, &[s])),
            };
            if cols == 0 {
                return Err(Error::InvalidArgument("broadcast to zero columns".into()));
            }
            let data = a.data().iter().flat_map(|&v| std::iter::repeat_n(v, cols)).collect();
            Tensor::from_raw(vec![r, cols], data)
        }
        Primitive::Concat => Tensor::concat_rows(xs)?,
        Primitive::Slice(start, end) => {
            if start >= end || end > a.rows() {
                return Err(Error::InvalidArgument(format!(
                    "slice {start}..{end} invalid for {} rows",
                    a.rows()
                )));
            }
            let c = a.cols();
            let mut shape = a.shape().to_vec();
            shape[0] = end - start;
            Tensor::from_raw(shape, a.data()[start * c..end * c].to_vec())
        }
        Primitive::GradReverse(c) => {
            if !(c >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "gradient reversal coefficient must be >= 0, got {c}"
                )));
            }
            a.clone()
        }
        Primitive::RowL2Norm => {
            let (r, _) = matrix_dims(op, a)?;
            let data = (0..r)
                .map(|i| a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Tensor::from_raw(vec![r, 1], data)
        }
    };
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow { op: op.name() });
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Option<(Primitive, Vec<usize>)>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Copies `x`'s value into a new constant node, cutting the graph.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let v = self.node(x)?.value.clone();
        Ok(self.constant(v))
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::NotOnTape);
        }
        self.nodes.get(v.id).ok_or(Error::NotOnTape)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("variable from another tape").value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    /// Evaluates `op` on `inputs` and records it when any input needs a gradient.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let mut vals = Vec::with_capacity(inputs.len());
        let mut requires = false;
        for &v in inputs {
            let n = self.node(v)?;
            requires |= n.requires_grad;
            vals.push(&n.value);
        }
        let out = evaluate(op, &vals)?;
        let rec = requires.then(|| (op, inputs.iter().map(|v| v.id).collect()));
        Ok(self.push(out, requires, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.apply(Primitive::Powf(p), &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumAll, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::MeanAll, &[a])
    }
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumRows, &[a])
    }
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumCols, &[a])
    }
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.apply(Primitive::BroadcastRows(rows), &[a])
    }
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        self.apply(Primitive::BroadcastCols(cols), &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::Slice(start, end), &[a])
    }
    pub fn grad_reverse(&mut self, a: Var, coefficient: f64) -> Result<Var> {
        self.apply(Primitive::GradReverse(coefficient), &[a])
    }
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::RowL2Norm, &[a])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients from every path are summed. The tape itself is not modified,
    /// so repeated calls return bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        let mut out = BTreeMap::new();
        if !root.requires_grad {
            return Ok(Gradients {
                tape: self.id,
                grads: out,
            });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some((op, parents)) = &node.op {
                self.propagate(*op, parents, &node.value, &g, &mut grads)?;
            }
            if node.requires_grad {
                out.insert(id, Tensor::from_raw(node.value.shape().to_vec(), g));
            }
        }
        for t in out.values() {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { op: "backward" });
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn propagate(
        &self,
        op: Primitive,
        parents: &[usize],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let val = |i: usize| &self.nodes[parents[i]].value;
        let wants = |i: usize| self.nodes[parents[i]].requires_grad;
        let send = |i: usize, contrib: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            accumulate(&mut grads[parents[i]], contrib);
        };
        let zip_map = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            g.iter().zip(x.data()).map(|(&gi, &xi)| f(gi, xi)).collect()
        };
        match op {
            Primitive::Add => {
                for i in 0..2 {
                    if wants(i) {
                        send(i, g.to_vec(), grads);
                    }
                }
            }
            Primitive::Sub => {
                if wants(0) {
                    send(0, g.to_vec(), grads);
                }
                if wants(1) {
                    send(1, g.iter().map(|v| -v).collect(), grads);
                }
            }
            Primitive::Mul => {
                if wants(0) {
                    send(0, zip_map(val(1), &|gi, b| gi * b), grads);
                }
                if wants(1) {
                    send(1, zip_map(val(0), &|gi, a| gi * a), grads);
                }
            }
            Primitive::Scale(c) => send(0, g.iter().map(|v| v * c).collect(), grads),
            Primitive::AddScalar(_) => send(0, g.to_vec(), grads),
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if wants(0) {
                    let bt = transpose_raw(b.data(), k, n);
                    send(0, matmul_raw(g, &bt, m, n, k), grads);
                }
                if wants(1) {
                    let at = transpose_raw(a.data(), m, k);
                    send(1, matmul_raw(&at, g, k, m, n), grads);
                }
            }
            Primitive::Transpose => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                send(0, transpose_raw(g, r, c), grads);
            }
            Primitive::Relu => send(
                0,
                zip_map(val(0), &|gi, x| if x > 0.0 { gi } else { 0.0 }),
                grads,
            ),
            Primitive::Exp => send(0, zip_map(out, &|gi, y| gi * y), grads),
            Primitive::Log => send(0, zip_map(val(0), &|gi, x| gi / x), grads),
            Primitive::Powf(p) => send(0, zip_map(val(0), &|gi, x| gi * p * x.powf(p - 1.0)), grads),
            Primitive::Abs => send(
                0,
                zip_map(val(0), &|gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                }),
                grads,
            ),
            Primitive::Softplus => send(0, zip_map(val(0), &|gi, x| gi * sigmoid(x)), grads),
            Primitive::LogSoftmax => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        d[i * c + j] = g[i * c + j] - out.data()[i * c + j].exp() * gs;
                    }
                }
                send(0, d, grads);
            }
            Primitive::SumAll => send(0, vec![g[0]; val(0).numel()], grads),
            Primitive::MeanAll => {
                let n = val(0).numel();
                send(0, vec![g[0] / n as f64; n], grads);
            }
            Primitive::SumRows => {
                let r = val(0).shape()[0];
                send(0, (0..r).flat_map(|_| g.iter().copied()).collect(), grads);
            }
            Primitive::SumCols => {
                let c = val(0).shape()[1];
                send(0, g.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect(), grads);
            }
            Primitive::BroadcastRows(rows) => {
                let c = val(0).numel();
                let mut d = vec![0.0; c];
                for i in 0..rows {
                    for (dj, gj) in d.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *dj += gj;
                    }
                }
                send(0, d, grads);
            }
            Primitive::BroadcastCols(cols) => {
                send(0, g.chunks(cols).map(|ch| ch.iter().sum()).collect(), grads);
            }
            Primitive::Concat => {
                let mut offset = 0;
                for i in 0..parents.len() {
                    let n = val(i).numel();
                    if wants(i) {
                        send(i, g[offset..offset + n].to_vec(), grads);
                    }
                    offset += n;
                }
            }
            Primitive::Slice(start, _) => {
                let a = val(0);
                let c = a.cols();
                let mut d = vec![0.0; a.numel()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                send(0, d, grads);
            }
            Primitive::GradReverse(c) => send(0, g.iter().map(|v| -c * v).collect(), grads),
            Primitive::RowL2Norm => {
                let a = val(0);
                let c = a.cols();
                let mut d = vec![0.0; a.numel()];
                for i in 0..a.rows() {
                    let norm = out.data()[i];
                    if norm > 0.0 {
                        for j in 0..c {
                            d[i * c + j] = g[i] * a.data()[i * c + j] / norm;
                        }
                    }
                }
                send(0, d, grads);
            }
        }
        Ok(())
    }

    /// `d loss / d x` with the shape of `x`.
    ///
    /// Returns zeros when `x` requires a gradient but does not influence
    /// `loss`; fails when `x` is not a differentiable node of this tape.
    pub fn input_gradient(&self, loss: Var, x: Var) -> Result<Tensor> {
        let node = self.node(x)?;
        if !node.requires_grad {
            return Err(Error::NotOnTape);
        }
        let grads = self.backward(loss)?;
        Ok(grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn add_relu_matmul_values() {
        let mut t = Tape::new();
        let a = t.constant(vec1(&[1.0, 2.0]));
        let b = t.constant(vec1(&[3.0, 4.0]));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);

        let r = t.constant(vec1(&[-1.0, 0.0, 2.0]));
        let r = t.relu(r).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

        let m = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        let i = t.constant(Tensor::eye(2));
        let mv = t.constant(m.clone());
        let p = t.matmul(i, mv).unwrap();
        assert_eq!(t.value(p), &m);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut t = Tape::new();
        let a = t.constant(vec1(&[1.0, 2.0]));
        let b = t.constant(vec1(&[1.0, 2.0, 3.0]));
        match t.add(a, b) {
            Err(Error::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2], vec![3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut t = Tape::new();
        let a = t.constant(vec1(&[1000.0]));
        assert!(matches!(t.exp(a), Err(Error::NumericOverflow { op: "exp" })));
        let z = t.constant(vec1(&[0.0]));
        assert!(matches!(t.log(z), Err(Error::NumericOverflow { .. })));
    }

    #[test]
    fn linear_and_quadratic_gradients() {
        let mut t = Tape::new();
        let w = t.constant(vec1(&[2.0, 3.0]));
        let x = t.leaf(vec1(&[0.7, -1.1]));
        let wx = t.mul(w, x).unwrap();
        let loss = t.sum(wx).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 3.0]);
        assert!(g.get(w).is_none());

        let mut t = Tape::new();
        let x = t.leaf(vec1(&[1.0, -2.0]));
        let xx = t.mul(x, x).unwrap();
        let loss = t.sum(xx).unwrap();
        assert_eq!(t.backward(loss).unwrap().get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn mean_gradient_and_constant_loss() {
        let mut t = Tape::new();
        let x = t.leaf(vec1(&[1.0, 2.0, 3.0, 4.0]));
        let m = t.mean(x).unwrap();
        assert_eq!(t.input_gradient(m, x).unwrap().data(), &[0.25; 4]);

        let c = t.constant(vec1(&[5.0]));
        let loss = t.sum(c).unwrap();
        assert_eq!(t.input_gradient(loss, x).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn disconnected_gradient_is_absent() {
        let mut t = Tape::new();
        let x = t.leaf(vec1(&[1.0]));
        let y = t.leaf(vec1(&[2.0]));
        let loss = t.sum(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.contains(x));
        assert!(!g.contains(y));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec1(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(vec1(&[1.0]));
        let l = t2.leaf(vec1(&[1.0]));
        assert!(matches!(t2.input_gradient(l, x), Err(Error::NotOnTape)));
        let c = t1.constant(vec1(&[1.0]));
        let s = t1.sum(x).unwrap();
        assert!(matches!(t1.input_gradient(s, c), Err(Error::NotOnTape)));
    }

    #[test]
    fn grad_reverse_negates() {
        let mut t = Tape::new();
        let x = t.leaf(vec1(&[0.3]));
        let r = t.grad_reverse(x, 1.0).unwrap();
        assert_eq!(t.value(r).data(), &[0.3]);
        let s = t.scale(r, 2.0).unwrap();
        let loss = t.sum(s).unwrap();
        assert_eq!(t.backward(loss).unwrap().get(x).unwrap().data(), &[-2.0]);

        let mut t = Tape::new();
        let x = t.leaf(vec1(&[0.3]));
        let r = t.grad_reverse(x, 0.0).unwrap();
        let loss = t.sum(r).unwrap();
        assert_eq!(t.backward(loss).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x) + sum(x) along two paths
        let mut t = Tape::new();
        let x = t.leaf(vec1(&[1.0, 1.0]));
        let a = t.sum(x).unwrap();
        let b = t.sum(x).unwrap();
        let loss = t.add(a, b).unwrap();
        assert_eq!(t.backward(loss).unwrap().get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn stop_gradient_cuts_graph() {
        let mut t = Tape::new();
        let x = t.leaf(vec1(&[1.5]));
        let s = t.stop_gradient(x).unwrap();
        let p = t.mul(x, s).unwrap();
        let loss = t.sum(p).unwrap();
        assert_eq!(t.backward(loss).unwrap().get(x).unwrap().data(), &[1.5]);
    }
}
