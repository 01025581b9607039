use std::cell::{Ref, RefCell};
use std::fmt;

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Log,
    Exp,
    Neg,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Binary(Binary, NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Unary(Unary, NodeId),
    LogClamped { input: NodeId, lo: f64, hi: f64 },
    Scale(NodeId, f64),
    Offset(NodeId),
    SoftmaxRows(NodeId),
    Reduce(Reduction, NodeId),
    ReduceAxis(Reduction, NodeId, usize),
    OuterFlatten(NodeId, NodeId),
    GradReverse(NodeId, f64),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Records operations in creation order so that a reverse sweep is a valid
/// topological traversal.
///
/// A tape is single-threaded; independent tapes can live on different
/// threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to one node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that collects gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A leaf that never collects gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::numeric(name, "non-finite forward value"));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn value_of(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into any
    /// previously stored gradients on the same tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        adj[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, node, &g, &mut adj);
            }
            adj[id] = Some(g);
        }
        drop(nodes);

        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in adj.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("backward", format!("non-finite gradient at node {id}")));
            }
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => {
                    *slot = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn binary_values<T>(&self, a: NodeId, b: NodeId, f: impl FnOnce(&Tensor, &Tensor) -> T) -> T {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], id: NodeId, contribution: impl FnOnce(&mut Vec<f64>)) {
    // caller guarantees `id` < current node, so the slot is still pending
    let slot = adj[id].get_or_insert_with(Vec::new);
    contribution(slot);
}

fn add_into(adj: &mut [Option<Vec<f64>>], id: NodeId, len: usize, values: impl Iterator<Item = f64>) {
    accumulate(adj, id, |slot| {
        if slot.is_empty() {
            slot.resize(len, 0.0);
        }
        slot.iter_mut().zip(values).for_each(|(s, v)| *s += v);
    });
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let needs = |id: NodeId| nodes[id].requires_grad;
    let val = |id: NodeId| &nodes[id].value;
    match node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2().expect("matmul lhs is rank 2");
            let n = val(b).shape()[1];
            if needs(a) {
                // dA = G · Bᵀ
                let bt = val(b).transpose().expect("rank 2");
                let mut da = vec![0.0; m * k];
                matmul_into(g, bt.data(), &mut da, m, n, k);
                add_into(adj, a, m * k, da.into_iter());
            }
            if needs(b) {
                // dB = Aᵀ · G
                let at = val(a).transpose().expect("rank 2");
                let mut db = vec![0.0; k * n];
                matmul_into(at.data(), g, &mut db, k, m, n);
                add_into(adj, b, k * n, db.into_iter());
            }
        }
        Op::Binary(kind, a, b) => {
            let len = g.len();
            match kind {
                Binary::Add => {
                    if needs(a) {
                        add_into(adj, a, len, g.iter().copied());
                    }
                    if needs(b) {
                        add_into(adj, b, len, g.iter().copied());
                    }
                }
                Binary::Sub => {
                    if needs(a) {
                        add_into(adj, a, len, g.iter().copied());
                    }
                    if needs(b) {
                        add_into(adj, b, len, g.iter().map(|v| -v));
                    }
                }
                Binary::Mul => {
                    let (av, bv) = (val(a).data(), val(b).data());
                    if needs(a) {
                        add_into(adj, a, len, g.iter().zip(bv).map(|(g, b)| g * b));
                    }
                    if needs(b) {
                        add_into(adj, b, len, g.iter().zip(av).map(|(g, a)| g * a));
                    }
                }
            }
        }
        Op::AddRow(a, bias) => {
            if needs(a) {
                add_into(adj, a, g.len(), g.iter().copied());
            }
            if needs(bias) {
                let n = val(bias).numel();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                add_into(adj, bias, n, db.into_iter());
            }
        }
        Op::Unary(kind, a) => {
            let x = val(a).data();
            let y = node.value.data();
            let len = g.len();
            match kind {
                Unary::Relu => add_into(
                    adj,
                    a,
                    len,
                    g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
                ),
                Unary::Log => add_into(adj, a, len, g.iter().zip(x).map(|(g, x)| g / x)),
                Unary::Exp => add_into(adj, a, len, g.iter().zip(y).map(|(g, y)| g * y)),
                Unary::Neg => add_into(adj, a, len, g.iter().map(|g| -g)),
                Unary::Sigmoid => add_into(adj, a, len, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y))),
            }
        }
        Op::LogClamped { input, lo, hi } => {
            let x = val(input).data();
            add_into(
                adj,
                input,
                g.len(),
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x >= lo && x <= hi { g / x } else { 0.0 }),
            );
        }
        Op::Scale(a, c) => add_into(adj, a, g.len(), g.iter().map(|g| g * c)),
        Op::Offset(a) => add_into(adj, a, g.len(), g.iter().copied()),
        Op::GradReverse(a, scale) => add_into(adj, a, g.len(), g.iter().map(|g| -scale * g)),
        Op::SoftmaxRows(a) => {
            let y = node.value.data();
            let k = *node.value.shape().last().expect("rank 2");
            let mut dz = vec![0.0; g.len()];
            for ((dz, gr), yr) in dz.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((d, g), y) in dz.iter_mut().zip(gr).zip(yr) {
                    *d = y * (g - dot);
                }
            }
            add_into(adj, a, g.len(), dz.into_iter());
        }
        Op::Reduce(kind, a) => {
            let n = val(a).numel();
            let v = match kind {
                Reduction::Sum => g[0],
                Reduction::Mean => g[0] / n as f64,
            };
            add_into(adj, a, n, std::iter::repeat_n(v, n));
        }
        Op::ReduceAxis(kind, a, axis) => {
            let shape = val(a).shape();
            let (outer, len, inner) = split_axis(shape, axis);
            let scale = match kind {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / len as f64,
            };
            let mut da = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        da[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            add_into(adj, a, da.len(), da.into_iter());
        }
        Op::OuterFlatten(f, p) => {
            let (b, d) = val(f).dims2().expect("rank 2");
            let k = val(p).shape()[1];
            let (fv, pv) = (val(f).data(), val(p).data());
            if needs(f) {
                let mut df = vec![0.0; b * d];
                for i in 0..b {
                    for a in 0..d {
                        let row = &g[i * d * k + a * k..i * d * k + (a + 1) * k];
                        df[i * d + a] = row.iter().zip(&pv[i * k..(i + 1) * k]).map(|(g, p)| g * p).sum();
                    }
                }
                add_into(adj, f, b * d, df.into_iter());
            }
            if needs(p) {
                let mut dp = vec![0.0; b * k];
                for i in 0..b {
                    for a in 0..d {
                        let fa = fv[i * d + a];
                        let row = &g[i * d * k + a * k..i * d * k + (a + 1) * k];
                        for (dp, g) in dp[i * k..(i + 1) * k].iter_mut().zip(row) {
                            *dp += g * fa;
                        }
                    }
                }
                add_into(adj, p, b * k, dp.into_iter());
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient, if a backward pass reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let out = self.tape.binary_values(self.id, rhs.id, |a, b| a.matmul(b))?;
        self.tape
            .push("matmul", out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn binary(&self, kind: Binary, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let out = self.tape.binary_values(self.id, rhs.id, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "elementwise",
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let f: fn(f64, f64) -> f64 = match kind {
                Binary::Add => |x, y| x + y,
                Binary::Sub => |x, y| x - y,
                Binary::Mul => |x, y| x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)
        })?;
        self.tape.push(
            "elementwise",
            out,
            Op::Binary(kind, self.id, rhs.id),
            &[self.id, rhs.id],
        )
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, rhs)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, rhs)
    }

    /// `[m×n] + [n]`, broadcasting the bias over rows.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let out = self.tape.binary_values(self.id, bias.id, |a, b| {
            let (_, n) = a.dims2()?;
            if b.numel() != n || b.rank() > 2 || (b.rank() == 2 && b.shape()[0] != 1) {
                return Err(Error::shape("add_row", format!("{:?} + {:?}", a.shape(), b.shape())));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
            }
            Tensor::new(a.shape().to_vec(), data)
        })?;
        self.tape
            .push("add_row", out, Op::AddRow(self.id, bias.id), &[self.id, bias.id])
    }

    pub fn unary(&self, kind: Unary) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            match kind {
                Unary::Relu => x.map(|v| v.max(0.0)),
                Unary::Exp => x.map(f64::exp),
                Unary::Neg => x.map(|v| -v),
                Unary::Sigmoid => x.map(sigmoid),
                Unary::Log => {
                    if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                        return Err(Error::numeric("log", format!("non-positive input {bad}")));
                    }
                    x.map(f64::ln)
                }
            }
        };
        self.tape.push("unary", out, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Unary::Relu)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }

    /// `log(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::numeric("log_clamped", format!("invalid clamp [{lo}, {hi}]")));
        }
        let out = self.value().map(|v| v.clamp(lo, hi).ln());
        self.tape.push(
            "log_clamped",
            out,
            Op::LogClamped { input: self.id, lo, hi },
            &[self.id],
        )
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v * c);
        self.tape.push("scale", out, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        let out = self.value().map(|v| v + c);
        self.tape.push("add_scalar", out, Op::Offset(self.id), &[self.id])
    }

    /// Row-wise softmax of a `[b×K]` matrix using max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let out = {
            let z = self.value();
            let (b, k) = z.dims2()?;
            if b == 0 || k == 0 {
                return Err(Error::shape("softmax_rows", format!("{:?}", z.shape())));
            }
            let mut data = z.data().to_vec();
            for row in data.chunks_mut(k) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
            Tensor::new(z.shape().to_vec(), data)?
        };
        self.tape
            .push("softmax_rows", out, Op::SoftmaxRows(self.id), &[self.id])
    }

    /// Full reduction to a rank-0 tensor.
    pub fn reduce(&self, kind: Reduction) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let s = x.sum();
            match kind {
                Reduction::Sum => Tensor::scalar(s),
                Reduction::Mean => {
                    if x.numel() == 0 {
                        return Err(Error::shape("mean", "empty tensor"));
                    }
                    Tensor::scalar(s / x.numel() as f64)
                }
            }
        };
        self.tape.push("reduce", out, Op::Reduce(kind, self.id), &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.reduce(Reduction::Sum)
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.reduce(Reduction::Mean)
    }

    /// Reduction along one axis; the axis is removed from the shape.
    pub fn reduce_axis(&self, kind: Reduction, axis: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if axis >= x.rank() {
                return Err(Error::Axis { axis, rank: x.rank() });
            }
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += x.data()[(o * len + l) * inner + i];
                    }
                }
            }
            if kind == Reduction::Mean {
                if len == 0 {
                    return Err(Error::shape("mean_axis", "empty axis"));
                }
                data.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, data)?
        };
        self.tape
            .push("reduce_axis", out, Op::ReduceAxis(kind, self.id, axis), &[self.id])
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(Reduction::Sum, axis)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(Reduction::Mean, axis)
    }

    /// Per-sample outer product `f_i ⊗ p_i`, flattened feature-major: column
    /// `a·K + k` holds `f[i, a] · p[i, k]`.
    pub fn outer_flatten(&self, p: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(p);
        let out = self.tape.binary_values(self.id, p.id, |f, p| {
            let (b, d) = f.dims2()?;
            let (bp, k) = p.dims2()?;
            if b != bp {
                return Err(Error::shape("outer_flatten", format!("batch {b} vs {bp}")));
            }
            let mut data = Vec::with_capacity(b * d * k);
            for i in 0..b {
                for &fa in f.row(i) {
                    data.extend(p.row(i).iter().map(|pk| fa * pk));
                }
            }
            Tensor::matrix(b, d * k, data)
        })?;
        self.tape
            .push("outer_flatten", out, Op::OuterFlatten(self.id, p.id), &[self.id, p.id])
    }

    /// Same value, cut from the graph.
    pub fn stop_gradient(&self) -> Var<'t> {
        let v = self.to_tensor();
        self.tape.constant(v)
    }

    /// Identity forward; backward multiplies the incoming gradient by `-scale`.
    pub fn gradient_reversal(&self, scale: f64) -> Result<Var<'t>> {
        if scale.is_nan() || scale < 0.0 {
            return Err(Error::numeric("gradient_reversal", format!("scale {scale} < 0")));
        }
        let out = self.to_tensor();
        self.tape
            .push("gradient_reversal", out, Op::GradReverse(self.id, scale), &[self.id])
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
