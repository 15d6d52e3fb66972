//! Eager reverse-mode tape.
//!
//! Every primitive computes its forward value at the moment it is recorded.
//! Nodes are appended in creation order, so inputs always precede their
//! consumers and a single reverse sweep visits each node once.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};
use crate::error::{DashError, Result};

/// Additive mask value for disallowed attention positions.
pub const MASK_NEG: f64 = -1e9;

/// Rows whose every mask entry is at or below this are treated as fully masked.
const FULLY_MASKED: f64 = MASK_NEG * 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds together with their non-tensor attributes.
///
/// Shape rules (inputs → output):
/// - `MatMul`: `[m,k] × [k,n] → [m,n]`
/// - `MatMulNT`: `[m,k] × [n,k] → [m,n]` (second operand transposed)
/// - `Transpose`: `[m,n] → [n,m]`
/// - `Add`, `Sub`, `Mul`: identical shapes, elementwise
/// - `AddRow`: `[m,n] + [n] → [m,n]` (broadcast over rows)
/// - `Scale`: any shape
/// - `Softmax`, `LogSoftmax`: over the last axis; the optional mask matches the input shape
/// - `LayerNorm`: `x [m,n], gain [n], bias [n] → [m,n]`
/// - `L2Normalize`: rows of the last axis
/// - `Sigmoid`, `Silu`: elementwise
/// - `Sum`, `Mean`, `SqFrobenius`: any shape `→ []`
/// - `Embedding`: `table [V,d] → [ids.len(), d]`
/// - `Gather`: `[m,n] → [m]`, one column index per row
/// - `SliceRows`, `SliceCols`: half-open ranges on a matrix
/// - `ConcatRows`, `ConcatCols`: matrices agreeing on the other axis
/// - `WeightedSum`: `p [n] or [1,n], x_1..x_n (same shape) → Σ p_i x_i`
/// - `DeltaScan`: `q [T,dk], k [T,dk], v [T,dv], gate [T,1], beta [T,1] → [T,dv]`
#[derive(Clone, Debug)]
pub enum Primitive {
    MatMul,
    MatMulNT,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale(f64),
    Softmax { mask: Option<Arc<Tensor>> },
    LogSoftmax,
    LayerNorm { eps: f64 },
    L2Normalize { eps: f64 },
    Sigmoid,
    Silu,
    Sum,
    Mean,
    SqFrobenius,
    Embedding { ids: Arc<Vec<usize>> },
    Gather { indices: Arc<Vec<usize>> },
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    ConcatRows,
    ConcatCols,
    WeightedSum,
    DeltaScan,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulNT => "matmul_nt",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::AddRow => "add_row",
            Primitive::Scale(_) => "scale",
            Primitive::Softmax { .. } => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::LayerNorm { .. } => "layer_norm",
            Primitive::L2Normalize { .. } => "l2_normalize",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Silu => "silu",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SqFrobenius => "sq_frobenius",
            Primitive::Embedding { .. } => "embedding",
            Primitive::Gather { .. } => "gather",
            Primitive::SliceRows { .. } => "slice_rows",
            Primitive::SliceCols { .. } => "slice_cols",
            Primitive::ConcatRows => "concat_rows",
            Primitive::ConcatCols => "concat_cols",
            Primitive::WeightedSum => "weighted_sum",
            Primitive::DeltaScan => "delta_scan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Param,
    Constant,
    Op,
}

/// Forward-pass values kept for the backward rule.
#[derive(Debug)]
enum Cache {
    None,
    /// Normalized input and per-row inverse standard deviation.
    LayerNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Per-row L2 norms.
    Norms(Vec<f64>),
    /// Recurrent states S_0..S_T, each `dk × dv`.
    States(Vec<f64>),
}

struct Node {
    prim: Option<Primitive>,
    inputs: Vec<NodeId>,
    value: Tensor,
    role: Role,
    requires_grad: bool,
    cache: Cache,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Default)]
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

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, Role::Param)
    }

    /// Constant leaf: no gradient is computed through it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, Role::Constant)
    }

    fn push_leaf(&mut self, value: Tensor, role: Role) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            prim: None,
            inputs: Vec::new(),
            value,
            role,
            requires_grad: role == Role::Param,
            cache: Cache::None,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].role == Role::Param
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records `prim` applied to `inputs`, evaluating it immediately.
    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        let (value, cache) = self.forward(&prim, inputs)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            prim: Some(prim),
            inputs: inputs.to_vec(),
            value,
            role: Role::Op,
            requires_grad,
            cache,
        });
        Ok(id)
    }

    // ---- convenience wrappers -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::MatMulNT, &[a, b])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.apply(Primitive::AddRow, &[a, bias])
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.apply(Primitive::Scale(s), &[a])
    }
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Softmax { mask: None }, &[a])
    }
    pub fn masked_softmax(&mut self, a: NodeId, mask: Arc<Tensor>) -> Result<NodeId> {
        self.apply(Primitive::Softmax { mask: Some(mask) }, &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }
    pub fn l2_normalize(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Primitive::L2Normalize { eps }, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Silu, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn sq_frobenius(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Primitive::SqFrobenius, &[a])
    }
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.apply(
            Primitive::Embedding {
                ids: Arc::new(ids.to_vec()),
            },
            &[table],
        )
    }
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.apply(
            Primitive::Gather {
                indices: Arc::new(indices.to_vec()),
            },
            &[a],
        )
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::SliceRows { start, end }, &[a])
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(Primitive::SliceCols { start, end }, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatRows, parts)
    }
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Primitive::ConcatCols, parts)
    }
    pub fn weighted_sum(&mut self, weights: NodeId, terms: &[NodeId]) -> Result<NodeId> {
        let mut inputs = Vec::with_capacity(terms.len() + 1);
        inputs.push(weights);
        inputs.extend_from_slice(terms);
        self.apply(Primitive::WeightedSum, &inputs)
    }
    pub fn delta_scan(&mut self, q: NodeId, k: NodeId, v: NodeId, gate: NodeId, beta: NodeId) -> Result<NodeId> {
        self.apply(Primitive::DeltaScan, &[q, k, v, gate, beta])
    }

    // ---- forward ---------------------------------------------------------------

    fn forward(&self, prim: &Primitive, inputs: &[NodeId]) -> Result<(Tensor, Cache)> {
        let name = prim.name();
        let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let arity = |n: usize| -> Result<()> {
            if vals.len() == n {
                Ok(())
            } else {
                Err(DashError::Shape {
                    op: name,
                    shapes: format!("expected {n} inputs, got {}", vals.len()),
                })
            }
        };
        let mismatch = || DashError::shape(name, &vals.iter().map(|v| v.shape()).collect::<Vec<_>>());
        let out = match prim {
            Primitive::MatMul => {
                arity(2)?;
                let (a, b) = (vals[0], vals[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch());
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = vec![0.0; m * n];
                matmul_nn(a.data(), b.data(), &mut out, m, k, n);
                Tensor::from_parts(vec![m, n], out)
            }
            Primitive::MatMulNT => {
                arity(2)?;
                let (a, b) = (vals[0], vals[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
                    return Err(mismatch());
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
                let mut out = vec![0.0; m * n];
                matmul_nt(a.data(), b.data(), &mut out, m, k, n);
                Tensor::from_parts(vec![m, n], out)
            }
            Primitive::Transpose => {
                arity(1)?;
                let a = vals[0];
                if a.rank() != 2 {
                    return Err(mismatch());
                }
                Tensor::from_parts(vec![a.shape()[1], a.shape()[0]], transpose(a))
            }
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                arity(2)?;
                let (a, b) = (vals[0], vals[1]);
                if a.shape() != b.shape() {
                    return Err(mismatch());
                }
                let f: fn(f64, f64) -> f64 = match prim {
                    Primitive::Add => |x, y| x + y,
                    Primitive::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Primitive::AddRow => {
                arity(2)?;
                let (a, b) = (vals[0], vals[1]);
                if a.rank() == 0 || b.rank() != 1 || a.cols() != b.numel() {
                    return Err(mismatch());
                }
                let n = a.cols();
                let data = a.data().iter().enumerate().map(|(i, &x)| x + b.data()[i % n]).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Primitive::Scale(s) => {
                arity(1)?;
                vals[0].map(|x| x * s)
            }
            Primitive::Softmax { mask } => {
                arity(1)?;
                let a = vals[0];
                if a.rank() == 0 {
                    return Err(mismatch());
                }
                if let Some(m) = mask {
                    if m.shape() != a.shape() {
                        return Err(DashError::shape(name, &[a.shape(), m.shape()]));
                    }
                }
                let n = a.cols();
                let mut out = vec![0.0; a.numel()];
                for r in 0..a.rows() {
                    let x = a.row(r);
                    let o = &mut out[r * n..(r + 1) * n];
                    match mask {
                        Some(m) => {
                            let mr = m.row(r);
                            if mr.iter().all(|&v| v <= FULLY_MASKED) {
                                continue;
                            }
                            for ((oi, &xi), &mi) in o.iter_mut().zip(x).zip(mr) {
                                *oi = xi + mi;
                            }
                        }
                        None => o.copy_from_slice(x),
                    }
                    softmax_in_place(o);
                }
                Tensor::from_parts(a.shape().to_vec(), out)
            }
            Primitive::LogSoftmax => {
                arity(1)?;
                let a = vals[0];
                if a.rank() == 0 {
                    return Err(mismatch());
                }
                let n = a.cols();
                let mut out = vec![0.0; a.numel()];
                for r in 0..a.rows() {
                    let x = a.row(r);
                    let lse = log_sum_exp(x);
                    for (o, &xi) in out[r * n..(r + 1) * n].iter_mut().zip(x) {
                        *o = xi - lse;
                    }
                }
                Tensor::from_parts(a.shape().to_vec(), out)
            }
            Primitive::LayerNorm { eps } => {
                arity(3)?;
                let (x, g, b) = (vals[0], vals[1], vals[2]);
                let n = x.cols();
                if x.rank() == 0 || g.shape() != [n] || b.shape() != [n] {
                    return Err(mismatch());
                }
                let rows = x.rows();
                let mut xhat = vec![0.0; x.numel()];
                let mut inv_std = vec![0.0; rows];
                let mut out = vec![0.0; x.numel()];
                for r in 0..rows {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let is = 1.0 / (var + eps).sqrt();
                    inv_std[r] = is;
                    for c in 0..n {
                        let h = (row[c] - mean) * is;
                        xhat[r * n + c] = h;
                        out[r * n + c] = h * g.data()[c] + b.data()[c];
                    }
                }
                return Ok((
                    Tensor::from_parts(x.shape().to_vec(), out),
                    Cache::LayerNorm { xhat, inv_std },
                ));
            }
            Primitive::L2Normalize { eps } => {
                arity(1)?;
                let a = vals[0];
                if a.rank() == 0 {
                    return Err(mismatch());
                }
                let n = a.cols();
                let mut norms = Vec::with_capacity(a.rows());
                let mut out = vec![0.0; a.numel()];
                for r in 0..a.rows() {
                    let row = a.row(r);
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    norms.push(norm);
                    let denom = norm + eps;
                    for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                        *o = v / denom;
                    }
                }
                return Ok((Tensor::from_parts(a.shape().to_vec(), out), Cache::Norms(norms)));
            }
            Primitive::Sigmoid => {
                arity(1)?;
                vals[0].map(sigmoid)
            }
            Primitive::Silu => {
                arity(1)?;
                vals[0].map(|x| x * sigmoid(x))
            }
            Primitive::Sum => {
                arity(1)?;
                Tensor::scalar(vals[0].data().iter().sum())
            }
            Primitive::Mean => {
                arity(1)?;
                Tensor::scalar(vals[0].data().iter().sum::<f64>() / vals[0].numel() as f64)
            }
            Primitive::SqFrobenius => {
                arity(1)?;
                Tensor::scalar(vals[0].data().iter().map(|v| v * v).sum())
            }
            Primitive::Embedding { ids } => {
                arity(1)?;
                let t = vals[0];
                if t.rank() != 2 || ids.is_empty() {
                    return Err(mismatch());
                }
                let (v, d) = (t.shape()[0], t.shape()[1]);
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids.iter() {
                    if id >= v {
                        return Err(DashError::TokenOutOfRange { id, vocab: v });
                    }
                    out.extend_from_slice(t.row(id));
                }
                Tensor::from_parts(vec![ids.len(), d], out)
            }
            Primitive::Gather { indices } => {
                arity(1)?;
                let a = vals[0];
                if a.rank() != 2 || indices.len() != a.shape()[0] {
                    return Err(mismatch());
                }
                let n = a.shape()[1];
                let mut out = Vec::with_capacity(indices.len());
                for (r, &c) in indices.iter().enumerate() {
                    if c >= n {
                        return Err(DashError::Shape {
                            op: name,
                            shapes: format!("index {c} out of range for {:?}", a.shape()),
                        });
                    }
                    out.push(a.get(r, c));
                }
                Tensor::from_parts(vec![indices.len()], out)
            }
            Primitive::SliceRows { start, end } => {
                arity(1)?;
                let a = vals[0];
                if a.rank() != 2 || start >= end || *end > a.shape()[0] {
                    return Err(DashError::Shape {
                        op: name,
                        shapes: format!("rows {start}..{end} of {:?}", a.shape()),
                    });
                }
                let n = a.shape()[1];
                Tensor::from_parts(vec![end - start, n], a.data()[start * n..end * n].to_vec())
            }
            Primitive::SliceCols { start, end } => {
                arity(1)?;
                let a = vals[0];
                if a.rank() != 2 || start >= end || *end > a.shape()[1] {
                    return Err(DashError::Shape {
                        op: name,
                        shapes: format!("cols {start}..{end} of {:?}", a.shape()),
                    });
                }
                let mut out = Vec::with_capacity(a.shape()[0] * (end - start));
                for r in 0..a.shape()[0] {
                    out.extend_from_slice(&a.row(r)[*start..*end]);
                }
                Tensor::from_parts(vec![a.shape()[0], end - start], out)
            }
            Primitive::ConcatRows => {
                if vals.is_empty() || vals.iter().any(|v| v.rank() != 2 || v.shape()[1] != vals[0].shape()[1]) {
                    return Err(mismatch());
                }
                let rows = vals.iter().map(|v| v.shape()[0]).sum();
                let mut out = Vec::with_capacity(rows * vals[0].shape()[1]);
                for v in &vals {
                    out.extend_from_slice(v.data());
                }
                Tensor::from_parts(vec![rows, vals[0].shape()[1]], out)
            }
            Primitive::ConcatCols => {
                if vals.is_empty() || vals.iter().any(|v| v.rank() != 2 || v.shape()[0] != vals[0].shape()[0]) {
                    return Err(mismatch());
                }
                let rows = vals[0].shape()[0];
                let cols = vals.iter().map(|v| v.shape()[1]).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for v in &vals {
                        out.extend_from_slice(v.row(r));
                    }
                }
                Tensor::from_parts(vec![rows, cols], out)
            }
            Primitive::WeightedSum => {
                if vals.len() < 2 {
                    return Err(mismatch());
                }
                let (p, terms) = (vals[0], &vals[1..]);
                if p.numel() != terms.len() || terms.iter().any(|t| t.shape() != terms[0].shape()) {
                    return Err(mismatch());
                }
                let mut out = vec![0.0; terms[0].numel()];
                for (w, t) in p.data().iter().zip(terms) {
                    for (o, &x) in out.iter_mut().zip(t.data()) {
                        *o += w * x;
                    }
                }
                Tensor::from_parts(terms[0].shape().to_vec(), out)
            }
            Primitive::DeltaScan => {
                arity(5)?;
                let (q, k, v, g, b) = (vals[0], vals[1], vals[2], vals[3], vals[4]);
                let ok = q.rank() == 2
                    && k.shape() == q.shape()
                    && v.rank() == 2
                    && v.shape()[0] == q.shape()[0]
                    && g.shape() == [q.shape()[0], 1]
                    && b.shape() == [q.shape()[0], 1];
                if !ok {
                    return Err(mismatch());
                }
                let (t_len, dk, dv) = (q.shape()[0], q.shape()[1], v.shape()[1]);
                let (y, states) = delta_scan_forward(q.data(), k.data(), v.data(), g.data(), b.data(), t_len, dk, dv);
                return Ok((Tensor::from_parts(vec![t_len, dv], y), Cache::States(states)));
            }
        };
        Ok((out, Cache::None))
    }

    // ---- backward --------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns a gradient for every
    /// trainable leaf created on this tape; leaves that do not influence
    /// `loss` get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_shape = self.nodes[loss.0].value.shape();
        if !loss_shape.is_empty() {
            return Err(DashError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.role != Role::Op || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let prim = node.prim.as_ref().expect("op nodes carry a primitive");
            let contributions = self.vjp(node, prim, &g);
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            // keep parameter gradients; intermediate ones are no longer needed
        }
        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.role == Role::Param {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.grads.insert(NodeId(idx), g);
            }
        }
        Ok(out)
    }

    /// Vector-Jacobian products for each input (None when the input needs no gradient).
    fn vjp(&self, node: &Node, prim: &Primitive, g: &Tensor) -> Vec<Option<Tensor>> {
        let want: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].requires_grad).collect();
        let val = |k: usize| &self.nodes[node.inputs[k].0].value;
        let y = &node.value;
        let gd = g.data();
        let some_if = |k: usize, f: &dyn Fn() -> Tensor| if want[k] { Some(f()) } else { None };
        match prim {
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                vec![
                    some_if(0, &|| {
                        let mut out = vec![0.0; m * k];
                        matmul_nt(gd, b.data(), &mut out, m, n, k);
                        Tensor::from_parts(vec![m, k], out)
                    }),
                    some_if(1, &|| {
                        let mut out = vec![0.0; k * n];
                        matmul_tn(a.data(), gd, &mut out, m, k, n);
                        Tensor::from_parts(vec![k, n], out)
                    }),
                ]
            }
            Primitive::MatMulNT => {
                let (a, b) = (val(0), val(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
                vec![
                    some_if(0, &|| {
                        let mut out = vec![0.0; m * k];
                        matmul_nn(gd, b.data(), &mut out, m, n, k);
                        Tensor::from_parts(vec![m, k], out)
                    }),
                    some_if(1, &|| {
                        let mut out = vec![0.0; n * k];
                        matmul_tn(gd, a.data(), &mut out, m, n, k);
                        Tensor::from_parts(vec![n, k], out)
                    }),
                ]
            }
            Primitive::Transpose => vec![some_if(0, &|| {
                Tensor::from_parts(vec![g.shape()[1], g.shape()[0]], transpose(g))
            })],
            Primitive::Add => vec![some_if(0, &|| g.clone()), some_if(1, &|| g.clone())],
            Primitive::Sub => vec![some_if(0, &|| g.clone()), some_if(1, &|| g.map(|v| -v))],
            Primitive::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    some_if(0, &|| elementwise(g, b, |x, y| x * y)),
                    some_if(1, &|| elementwise(g, a, |x, y| x * y)),
                ]
            }
            Primitive::AddRow => {
                let n = g.cols();
                vec![
                    some_if(0, &|| g.clone()),
                    some_if(1, &|| {
                        let mut out = vec![0.0; n];
                        for r in 0..g.rows() {
                            for (o, &v) in out.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        Tensor::from_parts(vec![n], out)
                    }),
                ]
            }
            Primitive::Scale(s) => vec![some_if(0, &|| g.map(|v| v * s))],
            Primitive::Softmax { .. } => vec![some_if(0, &|| {
                let n = y.cols();
                let mut out = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        out[r * n + c] = yr[c] * (gr[c] - dot);
                    }
                }
                Tensor::from_parts(y.shape().to_vec(), out)
            })],
            Primitive::LogSoftmax => vec![some_if(0, &|| {
                let n = y.cols();
                let mut out = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for c in 0..n {
                        out[r * n + c] = gr[c] - yr[c].exp() * total;
                    }
                }
                Tensor::from_parts(y.shape().to_vec(), out)
            })],
            Primitive::LayerNorm { .. } => {
                let Cache::LayerNorm { xhat, inv_std } = &node.cache else {
                    unreachable!("layer norm cache")
                };
                let gain = val(1);
                let n = y.cols();
                let rows = y.rows();
                vec![
                    some_if(0, &|| {
                        let mut out = vec![0.0; y.numel()];
                        for r in 0..rows {
                            let gr = g.row(r);
                            let xh = &xhat[r * n..(r + 1) * n];
                            let dxhat: Vec<f64> = gr.iter().zip(gain.data()).map(|(a, b)| a * b).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                            for c in 0..n {
                                out[r * n + c] = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                            }
                        }
                        Tensor::from_parts(y.shape().to_vec(), out)
                    }),
                    some_if(1, &|| {
                        let mut out = vec![0.0; n];
                        for r in 0..rows {
                            for c in 0..n {
                                out[c] += g.get(r, c) * xhat[r * n + c];
                            }
                        }
                        Tensor::from_parts(vec![n], out)
                    }),
                    some_if(2, &|| {
                        let mut out = vec![0.0; n];
                        for r in 0..rows {
                            for (o, &v) in out.iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        Tensor::from_parts(vec![n], out)
                    }),
                ]
            }
            Primitive::L2Normalize { eps } => {
                let Cache::Norms(norms) = &node.cache else {
                    unreachable!("l2 cache")
                };
                let x = val(0);
                vec![some_if(0, &|| {
                    let n = x.cols();
                    let mut out = vec![0.0; x.numel()];
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let gr = g.row(r);
                        let norm = norms[r];
                        let s = norm + eps;
                        let xg: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let coef = if norm > 0.0 { xg / (s * s * norm) } else { 0.0 };
                        for c in 0..n {
                            out[r * n + c] = gr[c] / s - xr[c] * coef;
                        }
                    }
                    Tensor::from_parts(x.shape().to_vec(), out)
                })]
            }
            Primitive::Sigmoid => vec![some_if(0, &|| elementwise(g, y, |gv, s| gv * s * (1.0 - s)))],
            Primitive::Silu => {
                let x = val(0);
                vec![some_if(0, &|| {
                    elementwise(g, x, |gv, xv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    })
                })]
            }
            Primitive::Sum => {
                let x = val(0);
                vec![some_if(0, &|| Tensor::full(x.shape(), g.item()))]
            }
            Primitive::Mean => {
                let x = val(0);
                vec![some_if(0, &|| Tensor::full(x.shape(), g.item() / x.numel() as f64))]
            }
            Primitive::SqFrobenius => {
                let x = val(0);
                let s = 2.0 * g.item();
                vec![some_if(0, &|| x.map(|v| s * v))]
            }
            Primitive::Embedding { ids } => {
                let t = val(0);
                vec![some_if(0, &|| {
                    let d = t.shape()[1];
                    let mut out = Tensor::zeros(t.shape());
                    let od = out.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in od[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    out
                })]
            }
            Primitive::Gather { indices } => {
                let a = val(0);
                vec![some_if(0, &|| {
                    let n = a.shape()[1];
                    let mut out = Tensor::zeros(a.shape());
                    for (r, &c) in indices.iter().enumerate() {
                        out.data_mut()[r * n + c] += gd[r];
                    }
                    out
                })]
            }
            Primitive::SliceRows { start, end } => {
                let a = val(0);
                vec![some_if(0, &|| {
                    let n = a.shape()[1];
                    let mut out = Tensor::zeros(a.shape());
                    out.data_mut()[start * n..end * n].copy_from_slice(gd);
                    out
                })]
            }
            Primitive::SliceCols { start, end } => {
                let a = val(0);
                vec![some_if(0, &|| {
                    let n = a.shape()[1];
                    let w = end - start;
                    let mut out = Tensor::zeros(a.shape());
                    for r in 0..a.shape()[0] {
                        out.data_mut()[r * n + start..r * n + end].copy_from_slice(&gd[r * w..(r + 1) * w]);
                    }
                    out
                })]
            }
            Primitive::ConcatRows => {
                let n = g.cols();
                let mut offset = 0;
                (0..node.inputs.len())
                    .map(|k| {
                        let rows = val(k).shape()[0];
                        let part = some_if(k, &|| {
                            Tensor::from_parts(vec![rows, n], gd[offset * n..(offset + rows) * n].to_vec())
                        });
                        offset += rows;
                        part
                    })
                    .collect()
            }
            Primitive::ConcatCols => {
                let total = g.cols();
                let rows = g.rows();
                let mut offset = 0;
                (0..node.inputs.len())
                    .map(|k| {
                        let w = val(k).shape()[1];
                        let part = some_if(k, &|| {
                            let mut out = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                out.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                            }
                            Tensor::from_parts(vec![rows, w], out)
                        });
                        offset += w;
                        part
                    })
                    .collect()
            }
            Primitive::WeightedSum => {
                let p = val(0);
                let mut out = Vec::with_capacity(node.inputs.len());
                out.push(some_if(0, &|| {
                    let data = (1..node.inputs.len())
                        .map(|k| val(k).data().iter().zip(gd).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::from_parts(p.shape().to_vec(), data)
                }));
                for k in 1..node.inputs.len() {
                    let w = p.data()[k - 1];
                    out.push(some_if(k, &|| g.map(|v| v * w)));
                }
                out
            }
            Primitive::DeltaScan => {
                let Cache::States(states) = &node.cache else {
                    unreachable!("scan cache")
                };
                let (q, k, v, gate, beta) = (val(0), val(1), val(2), val(3), val(4));
                let (t_len, dk, dv) = (q.shape()[0], q.shape()[1], v.shape()[1]);
                let grads = delta_scan_backward(
                    q.data(),
                    k.data(),
                    v.data(),
                    gate.data(),
                    beta.data(),
                    states,
                    gd,
                    t_len,
                    dk,
                    dv,
                );
                let shapes = [
                    vec![t_len, dk],
                    vec![t_len, dk],
                    vec![t_len, dv],
                    vec![t_len, 1],
                    vec![t_len, 1],
                ];
                grads
                    .into_iter()
                    .zip(shapes)
                    .enumerate()
                    .map(|(i, (data, shape))| want[i].then(|| Tensor::from_parts(shape, data)))
                    .collect()
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

fn transpose(a: &Tensor) -> Vec<f64> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    out
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Gated delta-rule scan with state `S ∈ R^{dk×dv}`:
/// `u = v_t − Sᵀk_t`, `S ← g_t·S + β_t·k_t·uᵀ`, `y_t = Sᵀq_t`.
#[allow(clippy::too_many_arguments)]
fn delta_scan_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    beta: &[f64],
    t_len: usize,
    dk: usize,
    dv: usize,
) -> (Vec<f64>, Vec<f64>) {
    let block = dk * dv;
    let mut states = vec![0.0; (t_len + 1) * block];
    let mut y = vec![0.0; t_len * dv];
    let mut u = vec![0.0; dv];
    for t in 0..t_len {
        let (prev_states, next_states) = states.split_at_mut((t + 1) * block);
        let prev = &prev_states[t * block..];
        let next = &mut next_states[..block];
        let kt = &k[t * dk..(t + 1) * dk];
        let qt = &q[t * dk..(t + 1) * dk];
        let vt = &v[t * dv..(t + 1) * dv];
        for j in 0..dv {
            let mut read = 0.0;
            for i in 0..dk {
                read += prev[i * dv + j] * kt[i];
            }
            u[j] = vt[j] - read;
        }
        let (gt, bt) = (g[t], beta[t]);
        for i in 0..dk {
            let bk = bt * kt[i];
            for j in 0..dv {
                next[i * dv + j] = gt * prev[i * dv + j] + bk * u[j];
            }
        }
        let yt = &mut y[t * dv..(t + 1) * dv];
        for j in 0..dv {
            let mut acc = 0.0;
            for i in 0..dk {
                acc += next[i * dv + j] * qt[i];
            }
            yt[j] = acc;
        }
    }
    (y, states)
}

#[allow(clippy::too_many_arguments)]
fn delta_scan_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    beta: &[f64],
    states: &[f64],
    dy: &[f64],
    t_len: usize,
    dk: usize,
    dv: usize,
) -> [Vec<f64>; 5] {
    let block = dk * dv;
    let mut dq = vec![0.0; t_len * dk];
    let mut dkey = vec![0.0; t_len * dk];
    let mut dval = vec![0.0; t_len * dv];
    let mut dg = vec![0.0; t_len];
    let mut dbeta = vec![0.0; t_len];
    let mut ds = vec![0.0; block];
    let mut u = vec![0.0; dv];
    let mut w = vec![0.0; dv];
    for t in (0..t_len).rev() {
        let prev = &states[t * block..(t + 1) * block];
        let cur = &states[(t + 1) * block..(t + 2) * block];
        let kt = &k[t * dk..(t + 1) * dk];
        let qt = &q[t * dk..(t + 1) * dk];
        let vt = &v[t * dv..(t + 1) * dv];
        let dyt = &dy[t * dv..(t + 1) * dv];
        let (gt, bt) = (g[t], beta[t]);

        for i in 0..dk {
            let mut acc = 0.0;
            for j in 0..dv {
                ds[i * dv + j] += qt[i] * dyt[j];
                acc += cur[i * dv + j] * dyt[j];
            }
            dq[t * dk + i] = acc;
        }
        for j in 0..dv {
            let mut read = 0.0;
            let mut wj = 0.0;
            for i in 0..dk {
                read += prev[i * dv + j] * kt[i];
                wj += ds[i * dv + j] * kt[i];
            }
            u[j] = vt[j] - read;
            w[j] = wj;
            dval[t * dv + j] = bt * wj;
        }
        let mut d_beta = 0.0;
        let mut d_gate = 0.0;
        for i in 0..dk {
            let mut ds_u = 0.0;
            let mut prev_w = 0.0;
            for j in 0..dv {
                let d = ds[i * dv + j];
                ds_u += d * u[j];
                prev_w += prev[i * dv + j] * w[j];
                d_gate += d * prev[i * dv + j];
            }
            d_beta += kt[i] * ds_u;
            dkey[t * dk + i] = bt * (ds_u - prev_w);
        }
        dbeta[t] = d_beta;
        dg[t] = d_gate;
        for i in 0..dk {
            let bk = bt * kt[i];
            for j in 0..dv {
                ds[i * dv + j] = gt * ds[i * dv + j] - bk * w[j];
            }
        }
    }
    [dq, dkey, dval, dg, dbeta]
}
