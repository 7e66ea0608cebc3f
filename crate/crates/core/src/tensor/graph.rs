use std::collections::HashMap;

use super::kernels::{self, dot, matmul, matmul_a_bt_acc, matmul_at_b_acc};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Sin,
    Cos,
    Tanh,
    Softplus,
    Sigmoid,
    Relu,
    Exp,
    Abs,
    Square,
    /// sqrt(x + eps)
    Sqrt(f64),
    /// Normalizes the last axis; eps sits inside the variance denominator.
    LayerNorm(f64),
    Softmax,
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Reshape(Vec<usize>),
    Transpose,
    Sum,
    Mean,
    SumAxis(usize),
    L1Norm,
    L2Norm,
    GatherRows(Vec<usize>),
    ScatterAddRows { index: Vec<usize>, rows: usize },
    Cross3,
    /// Multi-head dot-product attention of one query row over `t` key/value
    /// rows. Inputs: `[q, k_1..k_t, v_1..v_t]`.
    Attend { heads: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Tanh => "tanh",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Sqrt(_) => "sqrt",
            OpKind::LayerNorm(_) => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Concat(_) => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape(_) => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis(_) => "sum_axis",
            OpKind::L1Norm => "l1_norm",
            OpKind::L2Norm => "l2_norm",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::ScatterAddRows { .. } => "scatter_add_rows",
            OpKind::Cross3 => "cross3",
            OpKind::Attend { .. } => "attend",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    value: Tensor,
    needs_grad: bool,
}

/// A define-by-run computation graph. Nodes are appended in topological
/// order, so the node list doubles as the evaluation schedule.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

fn bcast_kind(lhs: &Tensor, rhs: &Tensor) -> Option<Bcast> {
    if lhs.shape() == rhs.shape() {
        return Some(Bcast::Same);
    }
    if rhs.len() == 1 {
        return Some(Bcast::Scalar);
    }
    let (r, c) = lhs.dims2();
    let (rr, rc) = rhs.dims2();
    if rr == 1 && rc == c && lhs.rank() <= 2 {
        return Some(Bcast::Row);
    }
    if rc == 1 && rr == r && lhs.rank() == 2 {
        return Some(Bcast::Col);
    }
    None
}

#[inline]
fn bcast_index(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

fn compute(op: &OpKind, ins: &[&Tensor], node: usize) -> Result<Tensor> {
    let shape_err = |lhs: &Tensor, rhs: &Tensor| Error::Shape {
        op: op.name(),
        node,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    };
    let out = match op {
        OpKind::Leaf | OpKind::Constant => unreachable!("leaves are not computed"),
        OpKind::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(a, b));
            }
            let (m, k) = a.dims2();
            let n = b.shape()[1];
            Tensor::from_parts(vec![m, n], matmul(a.data(), b.data(), m, k, n))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (ins[0], ins[1]);
            let kind = bcast_kind(a, b).ok_or_else(|| shape_err(a, b))?;
            let cols = a.dims2().1;
            let bd = b.data();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[bcast_index(kind, i, cols)];
                    match op {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        OpKind::Mul => x * y,
                        _ => x / y,
                    }
                })
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        OpKind::Scale(s) => unary(ins[0], |x| x * s),
        OpKind::AddScalar(s) => unary(ins[0], |x| x + s),
        OpKind::Sin => unary(ins[0], f64::sin),
        OpKind::Cos => unary(ins[0], f64::cos),
        OpKind::Tanh => unary(ins[0], f64::tanh),
        OpKind::Softplus => unary(ins[0], kernels::softplus),
        OpKind::Sigmoid => unary(ins[0], kernels::sigmoid),
        OpKind::Relu => unary(ins[0], |x| x.max(0.0)),
        OpKind::Exp => unary(ins[0], f64::exp),
        OpKind::Abs => unary(ins[0], f64::abs),
        OpKind::Square => unary(ins[0], |x| x * x),
        OpKind::Sqrt(eps) => unary(ins[0], |x| (x + eps).sqrt()),
        OpKind::LayerNorm(eps) => {
            let x = ins[0];
            let (r, c) = x.dims2();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o = (v - mean) * rstd;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        OpKind::Softmax => {
            let x = ins[0];
            let (r, c) = x.dims2();
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let out = &mut data[i * c..(i + 1) * c];
                let mut z = 0.0;
                for (o, v) in out.iter_mut().zip(row) {
                    *o = (v - max).exp();
                    z += *o;
                }
                out.iter_mut().for_each(|o| *o /= z);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        OpKind::Concat(axis) => {
            let first = ins[0];
            let (r0, c0) = first.dims2();
            match axis {
                0 => {
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for t in ins {
                        let (r, c) = t.dims2();
                        if c != c0 {
                            return Err(shape_err(first, t));
                        }
                        rows += r;
                        data.extend_from_slice(t.data());
                    }
                    Tensor::from_parts(vec![rows, c0], data)
                }
                1 => {
                    let mut cols = 0;
                    for t in ins {
                        let (r, c) = t.dims2();
                        if r != r0 {
                            return Err(shape_err(first, t));
                        }
                        cols += c;
                    }
                    let mut data = Vec::with_capacity(r0 * cols);
                    for i in 0..r0 {
                        for t in ins {
                            let c = t.dims2().1;
                            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                        }
                    }
                    Tensor::from_parts(vec![r0, cols], data)
                }
                _ => return Err(Error::InvalidArgument(format!("concat axis {axis}"))),
            }
        }
        OpKind::Slice { axis, start, len } => {
            let x = ins[0];
            let (r, c) = x.dims2();
            let (start, len) = (*start, *len);
            match axis {
                0 if start + len <= r && len > 0 => {
                    Tensor::from_parts(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())
                }
                1 if start + len <= c && len > 0 => {
                    let mut data = Vec::with_capacity(r * len);
                    for i in 0..r {
                        data.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
                    }
                    Tensor::from_parts(vec![r, len], data)
                }
                _ => {
                    return Err(Error::Shape {
                        op: "slice",
                        node,
                        lhs: x.shape().to_vec(),
                        rhs: vec![*axis, start, len],
                    })
                }
            }
        }
        OpKind::Reshape(shape) => {
            let x = ins[0];
            if shape.iter().product::<usize>() != x.len() || shape.iter().any(|&d| d == 0) {
                return Err(Error::Shape {
                    op: "reshape",
                    node,
                    lhs: x.shape().to_vec(),
                    rhs: shape.clone(),
                });
            }
            Tensor::from_parts(shape.clone(), x.data().to_vec())
        }
        OpKind::Transpose => {
            let x = ins[0];
            let (r, c) = x.dims2();
            Tensor::from_parts(vec![c, r], kernels::transpose(x.data(), r, c))
        }
        OpKind::Sum => Tensor::scalar(ins[0].data().iter().sum()),
        OpKind::Mean => Tensor::scalar(ins[0].data().iter().sum::<f64>() / ins[0].len() as f64),
        OpKind::SumAxis(axis) => {
            let x = ins[0];
            let (r, c) = x.dims2();
            match axis {
                0 => {
                    let mut data = vec![0.0; c];
                    for i in 0..r {
                        for (o, v) in data.iter_mut().zip(&x.data()[i * c..(i + 1) * c]) {
                            *o += v;
                        }
                    }
                    Tensor::from_parts(vec![1, c], data)
                }
                1 => {
                    let data = (0..r).map(|i| x.data()[i * c..(i + 1) * c].iter().sum()).collect();
                    Tensor::from_parts(vec![r, 1], data)
                }
                _ => return Err(Error::InvalidArgument(format!("sum axis {axis}"))),
            }
        }
        OpKind::L1Norm => Tensor::scalar(ins[0].data().iter().map(|v| v.abs()).sum()),
        OpKind::L2Norm => Tensor::scalar(ins[0].norm()),
        OpKind::GatherRows(index) => {
            let x = ins[0];
            let (r, c) = x.dims2();
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index {
                if i >= r {
                    return Err(Error::Shape {
                        op: "gather_rows",
                        node,
                        lhs: x.shape().to_vec(),
                        rhs: vec![i],
                    });
                }
                data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
            }
            Tensor::from_parts(vec![index.len(), c], data)
        }
        OpKind::ScatterAddRows { index, rows } => {
            let x = ins[0];
            let (r, c) = x.dims2();
            if r != index.len() || index.iter().any(|&i| i >= *rows) {
                return Err(Error::Shape {
                    op: "scatter_add_rows",
                    node,
                    lhs: x.shape().to_vec(),
                    rhs: vec![index.len(), *rows],
                });
            }
            let mut data = vec![0.0; rows * c];
            for (k, &i) in index.iter().enumerate() {
                for (o, v) in data[i * c..(i + 1) * c].iter_mut().zip(&x.data()[k * c..(k + 1) * c]) {
                    *o += v;
                }
            }
            Tensor::from_parts(vec![*rows, c], data)
        }
        OpKind::Cross3 => {
            let (a, b) = (ins[0], ins[1]);
            if a.len() != 3 || b.len() != 3 {
                return Err(shape_err(a, b));
            }
            let (a, b) = (a.data(), b.data());
            let data = vec![
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ];
            Tensor::from_parts(ins[0].shape().to_vec(), data)
        }
        OpKind::Attend { heads } => {
            let (q, t) = attend_split(ins)?;
            let d = q.len();
            if d % heads != 0 {
                return Err(Error::InvalidArgument(format!("{d} dims over {heads} heads")));
            }
            for k in &ins[1..] {
                if k.len() != d {
                    return Err(shape_err(q, k));
                }
            }
            let w = attend_weights(ins, *heads, t);
            let dh = d / heads;
            let mut out = vec![0.0; d];
            for h in 0..*heads {
                for i in 0..t {
                    let v = &ins[1 + t + i].data()[h * dh..(h + 1) * dh];
                    let wi = w[h * t + i];
                    for (o, vv) in out[h * dh..(h + 1) * dh].iter_mut().zip(v) {
                        *o += wi * vv;
                    }
                }
            }
            Tensor::from_parts(q.shape().to_vec(), out)
        }
    };
    Ok(out)
}

fn attend_split<'a>(ins: &[&'a Tensor]) -> Result<(&'a Tensor, usize)> {
    if ins.len() < 3 || (ins.len() - 1) % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "attend expects q plus matched keys/values, got {} inputs",
            ins.len()
        )));
    }
    Ok((ins[0], (ins.len() - 1) / 2))
}

/// Softmax attention weights, laid out `[head][key]`.
fn attend_weights(ins: &[&Tensor], heads: usize, t: usize) -> Vec<f64> {
    let q = ins[0].data();
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut w = vec![0.0; heads * t];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let row = &mut w[h * t..(h + 1) * t];
        for (i, s) in row.iter_mut().enumerate() {
            let k = &ins[1 + i].data()[h * dh..(h + 1) * dh];
            *s = dot(qh, k) * scale;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        row.iter_mut().for_each(|s| *s /= z);
    }
    w
}

fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push_raw(&mut self, op: OpKind, inputs: Vec<NodeId>, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, inputs, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or input); rebindable in [`Graph::forward_eval`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_raw(OpKind::Leaf, vec![], value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(OpKind::Constant, vec![], value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].op
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == OpKind::Leaf)
            .map(|(i, _)| NodeId(i))
    }

    /// Appends an operation node, evaluating it immediately.
    pub fn push(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if matches!(op, OpKind::Leaf | OpKind::Constant) {
            return Err(Error::InvalidArgument("leaves are created with leaf()/constant()".into()));
        }
        let node = self.nodes.len();
        let value = {
            let ins: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            compute(&op, &ins, node)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} at node {node}", op.name())));
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        Ok(self.push_raw(op, inputs.to_vec(), value, needs_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(OpKind::Div, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(OpKind::Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(OpKind::AddScalar(s), &[a])
    }
    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Sin, &[a])
    }
    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Cos, &[a])
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Tanh, &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Softplus, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Relu, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Exp, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Abs, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Square, &[a])
    }
    pub fn sqrt_eps(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.push(OpKind::Sqrt(eps), &[a])
    }
    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.push(OpKind::LayerNorm(eps), &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Softmax, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.push(OpKind::Concat(axis), parts)
    }
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push(OpKind::Slice { axis, start, len }, &[a])
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Transpose, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Mean, &[a])
    }
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.push(OpKind::SumAxis(axis), &[a])
    }
    pub fn l1_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::L1Norm, &[a])
    }
    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::L2Norm, &[a])
    }
    pub fn gather_rows(&mut self, a: NodeId, index: Vec<usize>) -> Result<NodeId> {
        self.push(OpKind::GatherRows(index), &[a])
    }
    pub fn scatter_add_rows(&mut self, a: NodeId, index: Vec<usize>, rows: usize) -> Result<NodeId> {
        self.push(OpKind::ScatterAddRows { index, rows }, &[a])
    }
    pub fn cross3(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(OpKind::Cross3, &[a, b])
    }
    pub fn attend(&mut self, q: NodeId, keys: &[NodeId], values: &[NodeId], heads: usize) -> Result<NodeId> {
        if keys.len() != values.len() || keys.is_empty() {
            return Err(Error::InvalidArgument("attend needs matched non-empty keys/values".into()));
        }
        let mut inputs = Vec::with_capacity(1 + 2 * keys.len());
        inputs.push(q);
        inputs.extend_from_slice(keys);
        inputs.extend_from_slice(values);
        self.push(OpKind::Attend { heads }, &inputs)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Re-evaluates every node with new leaf values and returns `output`.
    /// All leaves must be bound.
    pub fn forward_eval(&mut self, bindings: &HashMap<NodeId, Tensor>, output: NodeId) -> Result<Tensor> {
        for i in 0..self.nodes.len() {
            match self.nodes[i].op {
                OpKind::Leaf => {
                    let t = bindings.get(&NodeId(i)).ok_or(Error::UnboundLeaf(i))?;
                    if t.shape() != self.nodes[i].value.shape() {
                        return Err(Error::Shape {
                            op: "leaf",
                            node: i,
                            lhs: self.nodes[i].value.shape().to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    self.nodes[i].value = t.clone();
                }
                OpKind::Constant => {}
                _ => {
                    let value = {
                        let node = &self.nodes[i];
                        let ins: Vec<&Tensor> = node.inputs.iter().map(|j| &self.nodes[j.0].value).collect();
                        compute(&node.op, &ins, i)?
                    };
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!("{} at node {i}", self.nodes[i].op.name())));
                    }
                    self.nodes[i].value = value;
                }
            }
        }
        Ok(self.value(output).clone())
    }

    /// Reverse sweep from a scalar output. Returns a gradient for every leaf
    /// (zeros for leaves the output does not depend on).
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::NotScalar {
                node: output.0,
                shape: out.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.op == OpKind::Leaf {
                grads[i] = Some(g);
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op == OpKind::Leaf {
                let data = grads
                    .get_mut(i)
                    .and_then(|g| g.take())
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                map.insert(NodeId(i), Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        Ok(Gradients { grads: map })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let inp = |k: usize| &self.nodes[node.inputs[k].0];
        let wants = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
        let ix = |k: usize| node.inputs[k].0;

        macro_rules! elementwise {
            ($f:expr) => {{
                if wants(0) {
                    let x = inp(0).value.data();
                    let n = x.len();
                    let slot = acc(&mut grads[ix(0)], n);
                    let f = $f;
                    for j in 0..n {
                        slot[j] += g[j] * f(x[j], y.data()[j]);
                    }
                }
            }};
        }

        match &node.op {
            OpKind::Leaf | OpKind::Constant => {}
            OpKind::MatMul => {
                let (a, b) = (&inp(0).value, &inp(1).value);
                let (m, k) = a.dims2();
                let n = b.shape()[1];
                if wants(0) {
                    matmul_a_bt_acc(g, b.data(), acc(&mut grads[ix(0)], m * k), m, k, n);
                }
                if wants(1) {
                    matmul_at_b_acc(a.data(), g, acc(&mut grads[ix(1)], k * n), m, k, n);
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let (a, b) = (&inp(0).value, &inp(1).value);
                let kind = bcast_kind(a, b).expect("validated in forward");
                let cols = a.dims2().1;
                let (ad, bd) = (a.data(), b.data());
                if wants(0) {
                    let slot = acc(&mut grads[ix(0)], ad.len());
                    for j in 0..ad.len() {
                        let bv = bd[bcast_index(kind, j, cols)];
                        slot[j] += match node.op {
                            OpKind::Add | OpKind::Sub => g[j],
                            OpKind::Mul => g[j] * bv,
                            _ => g[j] / bv,
                        };
                    }
                }
                if wants(1) {
                    let slot = acc(&mut grads[ix(1)], bd.len());
                    for j in 0..ad.len() {
                        let bi = bcast_index(kind, j, cols);
                        let bv = bd[bi];
                        slot[bi] += match node.op {
                            OpKind::Add => g[j],
                            OpKind::Sub => -g[j],
                            OpKind::Mul => g[j] * ad[j],
                            _ => -g[j] * ad[j] / (bv * bv),
                        };
                    }
                }
            }
            OpKind::Scale(s) => elementwise!(|_, _| *s),
            OpKind::AddScalar(_) => elementwise!(|_, _| 1.0),
            OpKind::Sin => elementwise!(|x: f64, _| x.cos()),
            OpKind::Cos => elementwise!(|x: f64, _| -x.sin()),
            OpKind::Tanh => elementwise!(|_, y: f64| 1.0 - y * y),
            OpKind::Softplus => elementwise!(|x: f64, _| kernels::sigmoid(x)),
            OpKind::Sigmoid => elementwise!(|_, y: f64| y * (1.0 - y)),
            OpKind::Relu => elementwise!(|x: f64, _| if x > 0.0 { 1.0 } else { 0.0 }),
            OpKind::Exp => elementwise!(|_, y: f64| y),
            OpKind::Abs => elementwise!(|x: f64, _| x.signum() * (x != 0.0) as u8 as f64),
            OpKind::Square => elementwise!(|x: f64, _| 2.0 * x),
            OpKind::Sqrt(_) => elementwise!(|_, y: f64| 0.5 / y),
            OpKind::LayerNorm(eps) => {
                if wants(0) {
                    let x = &inp(0).value;
                    let (r, c) = x.dims2();
                    let slot = acc(&mut grads[ix(0)], r * c);
                    let cf = c as f64;
                    for row in 0..r {
                        let xr = &x.data()[row * c..(row + 1) * c];
                        let yr = &y.data()[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let mean = xr.iter().sum::<f64>() / cf;
                        let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cf;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let gsum: f64 = gr.iter().sum();
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            slot[row * c + j] += rstd * (gr[j] - gsum / cf - yr[j] * gy / cf);
                        }
                    }
                }
            }
            OpKind::Softmax => {
                if wants(0) {
                    let (r, c) = y.dims2();
                    let slot = acc(&mut grads[ix(0)], r * c);
                    for row in 0..r {
                        let yr = &y.data()[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            slot[row * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            OpKind::Concat(axis) => {
                let (rows, cols) = y.dims2();
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let (r, c) = inp(k).value.dims2();
                    if wants(k) {
                        let slot = acc(&mut grads[ix(k)], r * c);
                        if *axis == 0 {
                            for (s, gv) in slot.iter_mut().zip(&g[offset * cols..(offset + r) * cols]) {
                                *s += gv;
                            }
                        } else {
                            for row in 0..rows {
                                for j in 0..c {
                                    slot[row * c + j] += g[row * cols + offset + j];
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            OpKind::Slice { axis, start, len } => {
                if wants(0) {
                    let (r, c) = inp(0).value.dims2();
                    let slot = acc(&mut grads[ix(0)], r * c);
                    if *axis == 0 {
                        for (s, gv) in slot[start * c..(start + len) * c].iter_mut().zip(g) {
                            *s += gv;
                        }
                    } else {
                        for row in 0..r {
                            for j in 0..*len {
                                slot[row * c + start + j] += g[row * len + j];
                            }
                        }
                    }
                }
            }
            OpKind::Reshape(_) => elementwise!(|_, _| 1.0),
            OpKind::Transpose => {
                if wants(0) {
                    let (r, c) = inp(0).value.dims2();
                    let gt = kernels::transpose(g, c, r);
                    let slot = acc(&mut grads[ix(0)], r * c);
                    for (s, v) in slot.iter_mut().zip(gt) {
                        *s += v;
                    }
                }
            }
            OpKind::Sum | OpKind::Mean => {
                if wants(0) {
                    let n = inp(0).value.len();
                    let d = if node.op == OpKind::Mean { g[0] / n as f64 } else { g[0] };
                    acc(&mut grads[ix(0)], n).iter_mut().for_each(|s| *s += d);
                }
            }
            OpKind::SumAxis(axis) => {
                if wants(0) {
                    let (r, c) = inp(0).value.dims2();
                    let slot = acc(&mut grads[ix(0)], r * c);
                    for row in 0..r {
                        for j in 0..c {
                            slot[row * c + j] += if *axis == 0 { g[j] } else { g[row] };
                        }
                    }
                }
            }
            OpKind::L1Norm => {
                if wants(0) {
                    let x = inp(0).value.data();
                    let slot = acc(&mut grads[ix(0)], x.len());
                    for (s, v) in slot.iter_mut().zip(x) {
                        if *v != 0.0 {
                            *s += g[0] * v.signum();
                        }
                    }
                }
            }
            OpKind::L2Norm => {
                if wants(0) {
                    let x = inp(0).value.data();
                    let norm = y.data()[0];
                    let slot = acc(&mut grads[ix(0)], x.len());
                    if norm > 0.0 {
                        for (s, v) in slot.iter_mut().zip(x) {
                            *s += g[0] * v / norm;
                        }
                    }
                }
            }
            OpKind::GatherRows(index) => {
                if wants(0) {
                    let (r, c) = inp(0).value.dims2();
                    let slot = acc(&mut grads[ix(0)], r * c);
                    for (k, &row) in index.iter().enumerate() {
                        for j in 0..c {
                            slot[row * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            OpKind::ScatterAddRows { index, .. } => {
                if wants(0) {
                    let c = y.dims2().1;
                    let slot = acc(&mut grads[ix(0)], index.len() * c);
                    for (k, &row) in index.iter().enumerate() {
                        for j in 0..c {
                            slot[k * c + j] += g[row * c + j];
                        }
                    }
                }
            }
            OpKind::Cross3 => {
                let (a, b) = (inp(0).value.data(), inp(1).value.data());
                // d(a×b) = da×b + a×db; adjoint: ga = b×g, gb = g×a
                if wants(0) {
                    let slot = acc(&mut grads[ix(0)], 3);
                    slot[0] += b[1] * g[2] - b[2] * g[1];
                    slot[1] += b[2] * g[0] - b[0] * g[2];
                    slot[2] += b[0] * g[1] - b[1] * g[0];
                }
                if wants(1) {
                    let slot = acc(&mut grads[ix(1)], 3);
                    slot[0] += g[1] * a[2] - g[2] * a[1];
                    slot[1] += g[2] * a[0] - g[0] * a[2];
                    slot[2] += g[0] * a[1] - g[1] * a[0];
                }
            }
            OpKind::Attend { heads } => {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|j| &self.nodes[j.0].value).collect();
                let t = (ins.len() - 1) / 2;
                let w = attend_weights(&ins, *heads, t);
                let q = ins[0].data();
                let d = q.len();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                // ds[h·t + i]: gradient of the pre-softmax score of key i in head h
                let mut ds = vec![0.0; heads * t];
                for h in 0..*heads {
                    let span = h * dh..(h + 1) * dh;
                    let gh = &g[span.clone()];
                    let wh = &w[h * t..(h + 1) * t];
                    let dw: Vec<f64> = (0..t).map(|i| dot(gh, &ins[1 + t + i].data()[span.clone()])).collect();
                    let mix: f64 = wh.iter().zip(&dw).map(|(a, b)| a * b).sum();
                    for i in 0..t {
                        ds[h * t + i] = wh[i] * (dw[i] - mix) * scale;
                    }
                }
                if wants(0) {
                    let slot = acc(&mut grads[ix(0)], d);
                    for h in 0..*heads {
                        for i in 0..t {
                            let k = &ins[1 + i].data()[h * dh..(h + 1) * dh];
                            let c = ds[h * t + i];
                            for (s, kv) in slot[h * dh..(h + 1) * dh].iter_mut().zip(k) {
                                *s += c * kv;
                            }
                        }
                    }
                }
                for i in 0..t {
                    if wants(1 + i) {
                        let slot = acc(&mut grads[ix(1 + i)], d);
                        for h in 0..*heads {
                            let c = ds[h * t + i];
                            for (s, qv) in slot[h * dh..(h + 1) * dh].iter_mut().zip(&q[h * dh..(h + 1) * dh]) {
                                *s += c * qv;
                            }
                        }
                    }
                    if wants(1 + t + i) {
                        let slot = acc(&mut grads[ix(1 + t + i)], d);
                        for h in 0..*heads {
                            let c = w[h * t + i];
                            for (s, gv) in slot[h * dh..(h + 1) * dh].iter_mut().zip(&g[h * dh..(h + 1) * dh]) {
                                *s += c * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

