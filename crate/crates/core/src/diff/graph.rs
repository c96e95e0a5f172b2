use std::collections::BTreeMap;
use std::sync::Arc;

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative slope used by the leaky-ReLU layers of the residual architectures.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Norms below this are treated as a degenerate unit projection.
pub const MIN_PROJECTION_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a leaf participates in differentiation. `Constant` leaves receive no
/// gradient, which lets sampling skip the parameter-gradient matmuls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
    Constant,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    RowLogSumExp(NodeId),
    SqDist(NodeId, NodeId),
    L2Norm(NodeId),
    RowNormalize(NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::BiasAdd(..) => "bias_add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::RowLogSumExp(_) => "row_logsumexp",
            Op::SqDist(..) => "sq_dist",
            Op::L2Norm(_) => "l2_norm",
            Op::RowNormalize(_) => "row_normalize",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in evaluation order, so the node
/// list is always a valid topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every `Param` and `Input` leaf.
#[derive(Clone, Debug, Default)]
pub struct GradientSet {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientSet {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(any(test, feature = "fault-injection"))]
thread_local! {
    static SIGMOID_FAULT: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Corrupts the sigmoid derivative rule on the current thread. Only for
/// mutation-testing the finite-difference checks.
#[cfg(any(test, feature = "fault-injection"))]
pub fn set_sigmoid_fault(on: bool) {
    SIGMOID_FAULT.with(|f| f.set(on));
}

#[inline]
fn sigmoid_fault_factor() -> f64 {
    #[cfg(any(test, feature = "fault-injection"))]
    {
        if SIGMOID_FAULT.with(|f| f.get()) {
            return 1.5;
        }
    }
    1.0
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn reduced_shape(t: &Tensor) -> Vec<usize> {
    let s = t.shape();
    if s.is_empty() {
        Vec::new()
    } else {
        s[..s.len() - 1].to_vec()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes[id.0].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, kind: LeafKind) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            value,
            requires_grad: kind != LeafKind::Constant,
        });
        id
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf_shared(Arc::new(value), LeafKind::Param)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf_shared(Arc::new(value), LeafKind::Input)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf_shared(Arc::new(value), LeafKind::Constant)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf(_) => unreachable!(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::BiasAdd(a, b)
            | Op::SqDist(a, b) => self.requires_grad(*a) || self.requires_grad(*b),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::RowLogSumExp(a)
            | Op::L2Norm(a)
            | Op::RowNormalize(a)
            | Op::Transpose(a)
            | Op::Reshape(a) => self.requires_grad(*a),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(id)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor. The only
    /// broadcasting primitive.
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tx.rank() == 0 || tx.last_dim() != tb.len() {
            return Err(shape_err("bias_add", tx, tb));
        }
        let n = tb.len();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(Op::BiasAdd(x, bias), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(Op::Mean(a), v)
    }

    /// Sum over the last axis: `[.., n] -> [..]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(shape_err("row_sum", t, t));
        }
        let v: Vec<f64> = t.iter_rows().map(|r| r.iter().sum()).collect();
        let v = Tensor::from_parts(reduced_shape(t), v);
        self.push(Op::RowSum(a), v)
    }

    /// Stable `log(sum(exp(.)))` over the last axis.
    pub fn row_logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() == 0 || t.last_dim() == 0 {
            return Err(shape_err("row_logsumexp", t, t));
        }
        let v: Vec<f64> = t.iter_rows().map(logsumexp).collect();
        let v = Tensor::from_parts(reduced_shape(t), v);
        self.push(Op::RowLogSumExp(a), v)
    }

    /// Squared L2 distance between two equally shaped tensors (scalar).
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sq_dist", a, b)?;
        let d: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Op::SqDist(a, b), Tensor::scalar(d))
    }

    /// L2 norm of the whole tensor (scalar).
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).norm());
        self.push(Op::L2Norm(a), v)
    }

    /// Divides every row (last axis) by its L2 norm.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(shape_err("row_normalize", t, t));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(t.last_dim().max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < MIN_PROJECTION_NORM {
                return Err(Error::DegenerateProjection { norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(Op::RowNormalize(a), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(shape_err("transpose", t, t));
        }
        let v = transpose(t);
        self.push(Op::Transpose(a), v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(a), v)
    }

    /// Reverse-mode accumulation from a scalar `loss`. The graph is left
    /// untouched and can be differentiated again.
    pub fn backward(&self, loss: NodeId) -> Result<GradientSet> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut out = GradientSet::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    node: i,
                    op: node.op.name(),
                });
            }
            match node.op {
                Op::Leaf(_) => {
                    out.grads.insert(NodeId(i), g);
                }
                _ => self.propagate(&node.op, &node.value, g, &mut adj),
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(kind) = node.op {
                if kind != LeafKind::Constant {
                    out.grads
                        .entry(NodeId(i))
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.requires_grad(id) {
            return;
        }
        match &mut adj[id.0] {
            Some(existing) => {
                for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: Tensor, adj: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                    self.accumulate(adj, a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                    self.accumulate(adj, b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(b) {
                    self.accumulate(adj, b, g.clone());
                }
                self.accumulate(adj, a, g);
            }
            Op::Sub(a, b) => {
                if self.requires_grad(b) {
                    self.accumulate(adj, b, g.map(|v| -v));
                }
                self.accumulate(adj, a, g);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(adj, a, zip_map(&g, self.value(b), |x, y| x * y));
                }
                if self.requires_grad(b) {
                    self.accumulate(adj, b, zip_map(&g, self.value(a), |x, y| x * y));
                }
            }
            Op::BiasAdd(x, bias) => {
                if self.requires_grad(bias) {
                    let n = self.value(bias).len();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(adj, bias, Tensor::from_parts(vec![n], db));
                }
                self.accumulate(adj, x, g);
            }
            Op::Scale(a, c) => self.accumulate(adj, a, g.map(|v| c * v)),
            Op::Relu(a) => {
                let da = zip_map(&g, self.value(a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(adj, a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let da = zip_map(&g, self.value(a), |gv, x| if x > 0.0 { gv } else { slope * gv });
                self.accumulate(adj, a, da);
            }
            Op::Sigmoid(a) => {
                let f = sigmoid_fault_factor();
                let da = zip_map(&g, y, |gv, s| f * gv * s * (1.0 - s));
                self.accumulate(adj, a, da);
            }
            Op::Square(a) => {
                let da = zip_map(&g, self.value(a), |gv, x| 2.0 * x * gv);
                self.accumulate(adj, a, da);
            }
            Op::Exp(a) => self.accumulate(adj, a, zip_map(&g, y, |gv, e| gv * e)),
            Op::Log(a) => {
                let da = zip_map(&g, self.value(a), |gv, x| gv / x);
                self.accumulate(adj, a, da);
            }
            Op::Sum(a) => {
                let ta = self.value(a);
                self.accumulate(adj, a, Tensor::full(ta.shape(), g.item()));
            }
            Op::Mean(a) => {
                let ta = self.value(a);
                let v = g.item() / ta.len() as f64;
                self.accumulate(adj, a, Tensor::full(ta.shape(), v));
            }
            Op::RowSum(a) => {
                let ta = self.value(a);
                let d = ta.last_dim();
                let mut da = Vec::with_capacity(ta.len());
                for &gv in g.data() {
                    da.extend(std::iter::repeat_n(gv, d));
                }
                self.accumulate(adj, a, Tensor::from_parts(ta.shape().to_vec(), da));
            }
            Op::RowLogSumExp(a) => {
                let ta = self.value(a);
                let mut da = Vec::with_capacity(ta.len());
                for ((row, &lse), &gv) in ta.iter_rows().zip(y.data()).zip(g.data()) {
                    da.extend(row.iter().map(|&x| gv * (x - lse).exp()));
                }
                self.accumulate(adj, a, Tensor::from_parts(ta.shape().to_vec(), da));
            }
            Op::SqDist(a, b) => {
                let gv = g.item();
                let da = zip_map(self.value(a), self.value(b), |x, z| 2.0 * (x - z) * gv);
                if self.requires_grad(b) {
                    self.accumulate(adj, b, da.map(|v| -v));
                }
                self.accumulate(adj, a, da);
            }
            Op::L2Norm(a) => {
                let n = y.item();
                let gv = g.item();
                let da = if n > 0.0 {
                    self.value(a).map(|x| gv * x / n)
                } else {
                    Tensor::zeros(self.value(a).shape())
                };
                self.accumulate(adj, a, da);
            }
            Op::RowNormalize(a) => {
                let ta = self.value(a);
                let d = ta.last_dim();
                let mut da = Vec::with_capacity(ta.len());
                for ((xr, yr), gr) in ta.iter_rows().zip(y.iter_rows()).zip(g.data().chunks(d)) {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    da.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / norm));
                }
                self.accumulate(adj, a, Tensor::from_parts(ta.shape().to_vec(), da));
            }
            Op::Transpose(a) => self.accumulate(adj, a, transpose(&g)),
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                let da = Tensor::from_parts(shape, g.into_data());
                self.accumulate(adj, a, da);
            }
        }
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out)
}

/// `log(sum(exp(xs)))` without overflow.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
