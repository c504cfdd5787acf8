//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is rebuilt for every step. Builder methods record a node and
//! check its shape rule immediately; values are computed by
//! [`Graph::forward`] and gradients by [`Graph::backward`]. Because the
//! recorded structure is independent of leaf values, a graph can be
//! re-evaluated after [`Graph::set_value`], which is what the finite
//! difference checker does.
//!
//! Shape rules (`[..]` means any number of leading axes, possibly none):
//!
//! | op | inputs | output |
//! |----|--------|--------|
//! | `matmul` | `[.., m, k]`, `[k, n]` or `[.., k, n]` | `[.., m, n]` |
//! | `add`/`sub`/`mul` | equal shapes | same |
//! | `affine` | `[.., i]`, `[i, o]`, `[o]` | `[.., o]` |
//! | `concat(axis)` | equal except `axis` | summed along `axis` |
//! | `mean(axis)` | any | axis removed (`[1]` if none left) |
//! | `sum`/`mean_all` | any | `[1]` |
//! | `softmax` | any | same, normalized along the last axis |
//! | `layer_norm` | `[.., c]`, `[c]`, `[c]` | `[.., c]` |
//! | `broadcast(lead)` | `s` | `lead ++ s` |
//! | `slice(axis, start, len)` | any | `len` along `axis` |
//! | `gather_rows(taps)` | `[.., c]` viewed as rows of `c` | `[taps.len(), c]` |

mod gradcheck;
mod kernels;

use std::sync::Arc;

pub use gradcheck::{grad_check, GradCheckReport};
use kernels::logsumexp;
#[cfg(test)]
use kernels::sigmoid as sigmoid_scalar;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use kernels::*;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A weighted combination of input rows, used for bilinear sampling.
pub type Taps = Vec<Vec<(usize, f64)>>;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    MatMulExact(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Affine(NodeId, NodeId, NodeId),
    Concat(Vec<NodeId>, usize),
    Mean(NodeId, usize),
    Sum(NodeId),
    MeanAll(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    LayerNorm(NodeId, NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Broadcast(NodeId),
    Slice(NodeId, usize, usize),
    GatherRows(NodeId, Arc<Taps>),
    CrossEntropy(NodeId, Arc<Vec<usize>>),
    BceWithLogits(NodeId, Arc<Tensor>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulExact(..) => "matmul_exact",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Affine(..) => "affine",
            Op::Concat(..) => "concat",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::MeanAll(..) => "mean_all",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::LayerNorm(..) => "layer_norm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Broadcast(..) => "broadcast",
            Op::Slice(..) => "slice",
            Op::GatherRows(..) => "gather_rows",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param)
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
    /// Forward by-product needed by backward (softmax probabilities,
    /// normalized activations, ...).
    saved: Option<Tensor>,
}

/// Gradients of a scalar loss with respect to every parameter node.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&id, |(n, _)| *n)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.entries.iter().map(|(n, t)| (*n, t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

fn fmt_shape(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameter nodes in registration order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or(Error::NotEvaluated(id.0))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            saved: None,
        });
        id
    }

    fn mismatch(&self, op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Input, shape, Some(t))
    }

    /// Learnable leaf; receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        let id = self.push(Op::Param, shape, Some(t));
        self.params.push(id);
        id
    }

    /// Replace a leaf value (same shape). Downstream values are invalidated
    /// until the next [`Graph::forward`].
    pub fn set_value(&mut self, id: NodeId, t: Tensor) -> Result<()> {
        let node = &self.nodes[id.0];
        if !node.op.is_leaf() {
            return Err(Error::InvalidArgument(format!(
                "node {} ({}) is not a leaf",
                id.0,
                node.op.name()
            )));
        }
        if node.shape != t.shape() {
            return Err(Error::ShapeMismatch {
                node: id.0,
                op: "set_value",
                expected: fmt_shape(&node.shape),
                actual: fmt_shape(t.shape()),
            });
        }
        self.nodes[id.0].value = Some(t);
        for n in &mut self.nodes[id.0 + 1..] {
            if !n.op.is_leaf() {
                n.value = None;
                n.saved = None;
            }
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.mismatch("matmul", "rank >= 2 operands", format!("{sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let kb = sb[sb.len() - 2];
        let batch_ok = sb.len() == 2 || sb[..sb.len() - 2] == sa[..sa.len() - 2];
        if k != kb || !batch_ok {
            return Err(self.mismatch(
                "matmul",
                format!("[.., m, {k}] x [{k}, n] or matching batch"),
                format!("{sa:?} x {sb:?}"),
            ));
        }
        let mut out = sa[..sa.len() - 1].to_vec();
        out.push(sb[sb.len() - 1]);
        Ok(self.push(Op::MatMul(a, b), out, None))
    }

    /// `[m, k] x [k, n]` where each output entry is the correctly rounded
    /// sum of its products, so it is invariant to reordering `k`.
    pub fn matmul_exact(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul_exact", "[m, k] x [k, n]", format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMulExact(a, b), vec![sa[0], sb[1]], None))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.mismatch(op, fmt_shape(sa), fmt_shape(sb)));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s, None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s, None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s, None))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, s), shape, None)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, s), shape, None)
    }

    /// Dense map `x · w + b` over the last axis.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sw.len() != 2 || sx[sx.len() - 1] != sw[0] || sb != [sw[1]] {
            return Err(self.mismatch(
                "affine",
                "[.., i] . [i, o] + [o]",
                format!("{sx:?} . {sw:?} + {sb:?}"),
            ));
        }
        let mut out = sx;
        *out.last_mut().unwrap() = sw[1];
        Ok(self.push(Op::Affine(x, w, b), out, None))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| self.mismatch("concat", "at least one input", "none"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(self.mismatch("concat", format!("axis < {}", base.len()), format!("axis {axis}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(self.mismatch("concat", fmt_shape(&base), fmt_shape(s)));
            }
            total += s[axis];
        }
        let mut out = base;
        out[axis] = total;
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out, None))
    }

    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(self.mismatch("mean", format!("axis < {}", s.len()), format!("axis {axis}")));
        }
        let mut out = s;
        out.remove(axis);
        if out.is_empty() {
            out.push(1);
        }
        Ok(self.push(Op::Mean(a, axis), out, None))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![1], None)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanAll(a), vec![1], None)
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(op, s, None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softmax(a), a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a)
    }

    /// Normalize over the last axis, then scale by `gain` and shift by `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let c = sx[sx.len() - 1];
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(self.mismatch(
                "layer_norm",
                format!("gain/bias [{c}]"),
                format!("{:?}/{:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        Ok(self.push(Op::LayerNorm(x, gain, bias), sx, None))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        if shape.is_empty() || shape.contains(&0) || numel(shape) != numel(s) {
            return Err(self.mismatch("reshape", format!("{} elements", numel(s)), fmt_shape(shape)));
        }
        Ok(self.push(Op::Reshape(a), shape.to_vec(), None))
    }

    /// Output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        let valid = perm.len() == s.len()
            && perm.iter().all(|&p| p < s.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(self.mismatch(
                "permute",
                format!("permutation of {} axes", s.len()),
                format!("{perm:?}"),
            ));
        }
        let out = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(Op::Permute(a, perm.to_vec()), out, None))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(self.mismatch("permute", "rank >= 2", fmt_shape(self.shape(a))));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    /// Repeat `a` across new leading axes.
    pub fn broadcast(&mut self, a: NodeId, leading: &[usize]) -> Result<NodeId> {
        if leading.contains(&0) {
            return Err(self.mismatch("broadcast", "non-zero leading dims", fmt_shape(leading)));
        }
        let mut out = leading.to_vec();
        out.extend_from_slice(self.shape(a));
        Ok(self.push(Op::Broadcast(a), out, None))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(self.mismatch(
                "slice",
                format!("range within {s:?} on axis {axis}"),
                format!("{start}..{}", start + len),
            ));
        }
        let mut out = s;
        out[axis] = len;
        Ok(self.push(Op::Slice(a, axis, start), out, None))
    }

    /// `out[r] = Σ w · rows[i]` for each `(i, w)` in `taps[r]`, where `rows`
    /// views the input as rows of its last-axis width.
    pub fn gather_rows(&mut self, a: NodeId, taps: Taps) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        let c = s[s.len() - 1];
        let rows = numel(&s) / c;
        if taps.is_empty() {
            return Err(self.mismatch("gather_rows", "at least one output row", "none"));
        }
        if let Some(&(bad, _)) = taps.iter().flatten().find(|(i, _)| *i >= rows) {
            return Err(self.mismatch("gather_rows", format!("row index < {rows}"), format!("{bad}")));
        }
        let out = vec![taps.len(), c];
        Ok(self.push(Op::GatherRows(a, Arc::new(taps)), out, None))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(self.mismatch(
                "cross_entropy",
                format!("[{}, classes]", labels.len()),
                fmt_shape(&s),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= s[1]) {
            return Err(Error::LabelOutOfRange { label, classes: s[1] });
        }
        Ok(self.push(Op::CrossEntropy(logits, Arc::new(labels.to_vec())), vec![1], None))
    }

    /// Mean binary cross-entropy with logits against `{0, 1}` targets.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        if self.shape(logits) != targets.shape() {
            return Err(self.mismatch(
                "bce_with_logits",
                fmt_shape(self.shape(logits)),
                fmt_shape(targets.shape()),
            ));
        }
        if let Some(&value) = targets.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinary {
                value,
                context: "bce_with_logits targets".into(),
            });
        }
        Ok(self.push(Op::BceWithLogits(logits, Arc::new(targets.clone())), vec![1], None))
    }

    /// Evaluate every non-leaf node in recording order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                let v = self.nodes[i].value.as_ref().ok_or(Error::NotEvaluated(i))?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "{} node {i}",
                        self.nodes[i].op.name()
                    )));
                }
                continue;
            }
            let (value, saved) = self.eval(i)?;
            self.nodes[i].value = Some(value);
            self.nodes[i].saved = saved;
        }
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("inputs are evaluated before their consumers")
    }

    fn eval(&self, i: usize) -> Result<(Tensor, Option<Tensor>)> {
        let node = &self.nodes[i];
        let shape = node.shape.clone();
        let out = |data: Vec<f64>| Tensor::from_parts(shape.clone(), data);
        let r = match &node.op {
            Op::Input | Op::Param => unreachable!(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let sa = va.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = vb.shape()[vb.ndim() - 1];
                let mut c = vec![0.0; numel(&shape)];
                if vb.ndim() == 2 {
                    let rows = va.len() / k;
                    mm_nn(va.data(), vb.data(), &mut c, rows, k, n);
                } else {
                    let batch = va.len() / (m * k);
                    for t in 0..batch {
                        mm_nn(
                            &va.data()[t * m * k..(t + 1) * m * k],
                            &vb.data()[t * k * n..(t + 1) * k * n],
                            &mut c[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                (out(c), None)
            }
            Op::MatMulExact(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (shape[0], va.shape()[1], shape[1]);
                let mut c = vec![0.0; m * n];
                mm_exact(va.data(), vb.data(), &mut c, m, k, n);
                (out(c), None)
            }
            Op::Add(a, b) => (self.val(*a).zip_with(self.val(*b), |x, y| x + y)?, None),
            Op::Sub(a, b) => (self.val(*a).zip_with(self.val(*b), |x, y| x - y)?, None),
            Op::Mul(a, b) => (self.val(*a).zip_with(self.val(*b), |x, y| x * y)?, None),
            Op::Scale(a, s) => (self.val(*a).scale(*s), None),
            Op::AddScalar(a, s) => (self.val(*a).map(|v| v + s), None),
            Op::Affine(x, w, b) => {
                let (vx, vw, vb) = (self.val(*x), self.val(*w), self.val(*b));
                let (ni, no) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.len() / ni;
                let mut c = Vec::with_capacity(rows * no);
                for _ in 0..rows {
                    c.extend_from_slice(vb.data());
                }
                mm_nn(vx.data(), vw.data(), &mut c, rows, ni, no);
                (out(c), None)
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = around_axis(&shape, *axis);
                let mut c = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    for p in parts {
                        let v = self.val(*p);
                        let chunk = v.shape()[*axis] * inner;
                        c.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                (out(c), None)
            }
            Op::Mean(a, axis) => {
                let v = self.val(*a);
                let (outer, dim, inner) = around_axis(v.shape(), *axis);
                let mut c = vec![0.0; outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let src = &v.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                        for (cv, &x) in c[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *cv += x;
                        }
                    }
                }
                let inv = 1.0 / dim as f64;
                c.iter_mut().for_each(|x| *x *= inv);
                (out(c), None)
            }
            Op::Sum(a) => (Tensor::scalar(self.val(*a).sum()), None),
            Op::MeanAll(a) => {
                let v = self.val(*a);
                (Tensor::scalar(v.sum() / v.len() as f64), None)
            }
            Op::Sigmoid(a) => (self.val(*a).map(sigmoid), None),
            Op::Softmax(a) => {
                let v = self.val(*a);
                let n = v.shape()[v.ndim() - 1];
                (out(softmax_rows(v.data(), n)), None)
            }
            Op::Log(a) => (self.val(*a).map(f64::ln), None),
            Op::Exp(a) => (self.val(*a).map(f64::exp), None),
            Op::Tanh(a) => (self.val(*a).map(f64::tanh), None),
            Op::Relu(a) => (self.val(*a).map(|v| v.max(0.0)), None),
            Op::LayerNorm(x, g, b) => {
                let (vx, vg, vb) = (self.val(*x), self.val(*g), self.val(*b));
                let c = vg.len();
                let rows = vx.len() / c;
                let mut y = vec![0.0; vx.len()];
                let mut xhat = vec![0.0; vx.len()];
                let mut inv_std = vec![0.0; rows];
                for r in 0..rows {
                    let row = &vx.data()[r * c..(r + 1) * c];
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    inv_std[r] = inv;
                    for j in 0..c {
                        let h = (row[j] - mu) * inv;
                        xhat[r * c + j] = h;
                        y[r * c + j] = h * vg.data()[j] + vb.data()[j];
                    }
                }
                let mut saved = xhat;
                saved.extend_from_slice(&inv_std);
                (out(y), Some(Tensor::from_parts(vec![saved.len()], saved)))
            }
            Op::Reshape(a) => (out(self.val(*a).data().to_vec()), None),
            Op::Permute(a, perm) => {
                let v = self.val(*a);
                (out(permute(v.data(), v.shape(), perm)), None)
            }
            Op::Broadcast(a) => {
                let v = self.val(*a);
                let reps = numel(&shape) / v.len();
                let mut c = Vec::with_capacity(numel(&shape));
                for _ in 0..reps {
                    c.extend_from_slice(v.data());
                }
                (out(c), None)
            }
            Op::Slice(a, axis, start) => {
                let v = self.val(*a);
                let (outer, dim, inner) = around_axis(v.shape(), *axis);
                let len = shape[*axis];
                let mut c = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    c.extend_from_slice(&v.data()[base..base + len * inner]);
                }
                (out(c), None)
            }
            Op::GatherRows(a, taps) => {
                let v = self.val(*a);
                let c = shape[1];
                let mut y = vec![0.0; numel(&shape)];
                for (r, row_taps) in taps.iter().enumerate() {
                    let dst = &mut y[r * c..(r + 1) * c];
                    for &(src, w) in row_taps {
                        for (d, &s) in dst.iter_mut().zip(&v.data()[src * c..(src + 1) * c]) {
                            *d += w * s;
                        }
                    }
                }
                (out(y), None)
            }
            Op::CrossEntropy(a, labels) => {
                let v = self.val(*a);
                let k = v.shape()[1];
                let mut total = 0.0;
                for (row, &label) in v.data().chunks_exact(k).zip(labels.iter()) {
                    total += logsumexp(row) - row[label];
                }
                let probs = softmax_rows(v.data(), k);
                (
                    Tensor::scalar(total / labels.len() as f64),
                    Some(Tensor::from_parts(v.shape().to_vec(), probs)),
                )
            }
            Op::BceWithLogits(a, targets) => {
                let v = self.val(*a);
                let total: f64 = v
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &y)| bce_term(x, y))
                    .sum();
                (Tensor::scalar(total / v.len() as f64), None)
            }
        };
        Ok(r)
    }

    /// Reverse pass from a scalar `loss`. Every parameter node gets a
    /// gradient of its own shape (zeros if the loss does not depend on it).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if numel(&loss_node.shape) != 1 {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: loss_node.shape.clone(),
            });
        }
        for (i, n) in self.nodes[..=loss.0].iter().enumerate() {
            if n.value.is_none() {
                return Err(Error::NotEvaluated(i));
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(&loss_node.shape, 1.0));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].op.is_leaf() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }

        let mut entries: Vec<(NodeId, Tensor)> = self
            .params
            .iter()
            .map(|&p| {
                let g = if p.0 <= loss.0 { grads[p.0].take() } else { None };
                (p, g.unwrap_or_else(|| Tensor::zeros(&self.nodes[p.0].shape)))
            })
            .collect();
        entries.sort_by_key(|(n, _)| *n);
        Ok(Gradients { entries })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let sa = va.shape();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = vb.shape()[vb.ndim() - 1];
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                if vb.ndim() == 2 {
                    let rows = va.len() / k;
                    mm_nt(g.data(), vb.data(), &mut ga, rows, n, k);
                    mm_tn(va.data(), g.data(), &mut gb, k, rows, n);
                } else {
                    let batch = va.len() / (m * k);
                    for t in 0..batch {
                        let gs = &g.data()[t * m * n..(t + 1) * m * n];
                        mm_nt(
                            gs,
                            &vb.data()[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                        mm_tn(
                            &va.data()[t * m * k..(t + 1) * m * k],
                            gs,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
                acc(*a, Tensor::from_parts(va.shape().to_vec(), ga));
                acc(*b, Tensor::from_parts(vb.shape().to_vec(), gb));
            }
            Op::MatMulExact(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (node.shape[0], va.shape()[1], node.shape[1]);
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                mm_nt(g.data(), vb.data(), &mut ga, m, n, k);
                mm_tn(va.data(), g.data(), &mut gb, k, m, n);
                acc(*a, Tensor::from_parts(va.shape().to_vec(), ga));
                acc(*b, Tensor::from_parts(vb.shape().to_vec(), gb));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(*a, g.zip_with(vb, |x, y| x * y)?);
                acc(*b, g.zip_with(va, |x, y| x * y)?);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::Affine(x, w, b) => {
                let (vx, vw) = (self.val(*x), self.val(*w));
                let (ni, no) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.len() / ni;
                let mut gx = vec![0.0; vx.len()];
                let mut gw = vec![0.0; vw.len()];
                let mut gb = vec![0.0; no];
                mm_nt(g.data(), vw.data(), &mut gx, rows, no, ni);
                mm_tn(vx.data(), g.data(), &mut gw, ni, rows, no);
                for row in g.data().chunks_exact(no) {
                    for (d, &v) in gb.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*x, Tensor::from_parts(vx.shape().to_vec(), gx));
                acc(*w, Tensor::from_parts(vw.shape().to_vec(), gw));
                acc(*b, Tensor::from_parts(vec![no], gb));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = around_axis(&node.shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let sp = self.shape(*p).to_vec();
                    let len = sp[*axis];
                    let mut gp = Vec::with_capacity(numel(&sp));
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    acc(*p, Tensor::from_parts(sp, gp));
                }
            }
            Op::Mean(a, axis) => {
                let sa = self.shape(*a).to_vec();
                let (outer, dim, inner) = around_axis(&sa, *axis);
                let inv = 1.0 / dim as f64;
                let mut ga = Vec::with_capacity(numel(&sa));
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..dim {
                        ga.extend(src.iter().map(|v| v * inv));
                    }
                }
                acc(*a, Tensor::from_parts(sa, ga));
            }
            Op::Sum(a) => {
                let sa = self.shape(*a).to_vec();
                acc(*a, Tensor::full(&sa, g.item()));
            }
            Op::MeanAll(a) => {
                let sa = self.shape(*a).to_vec();
                let n = numel(&sa) as f64;
                acc(*a, Tensor::full(&sa, g.item() / n));
            }
            Op::Sigmoid(a) => {
                let y = node.value.as_ref().unwrap();
                acc(*a, g.zip_with(y, |gv, yv| gv * yv * (1.0 - yv))?);
            }
            Op::Softmax(a) => {
                let y = node.value.as_ref().unwrap();
                let n = node.shape[node.shape.len() - 1];
                let mut ga = vec![0.0; y.len()];
                for ((gr, yr), out) in g
                    .data()
                    .chunks_exact(n)
                    .zip(y.data().chunks_exact(n))
                    .zip(ga.chunks_exact_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::from_parts(node.shape.clone(), ga));
            }
            Op::Log(a) => acc(*a, g.zip_with(self.val(*a), |gv, x| gv / x)?),
            Op::Exp(a) => acc(*a, g.zip_with(node.value.as_ref().unwrap(), |gv, y| gv * y)?),
            Op::Tanh(a) => {
                acc(*a, g.zip_with(node.value.as_ref().unwrap(), |gv, y| gv * (1.0 - y * y))?)
            }
            Op::Relu(a) => acc(
                *a,
                g.zip_with(self.val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?,
            ),
            Op::LayerNorm(x, gn, b) => {
                let vg = self.val(*gn);
                let c = vg.len();
                let rows = numel(&node.shape) / c;
                let saved = node.saved.as_ref().unwrap().data();
                let (xhat, inv_std) = saved.split_at(rows * c);
                let mut gx = vec![0.0; rows * c];
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..c {
                        dxhat[j] = gr[j] * vg.data()[j];
                        sum_d += dxhat[j];
                        sum_dh += dxhat[j] * hr[j];
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                    }
                    let scale = inv_std[r] / c as f64;
                    for j in 0..c {
                        gx[r * c + j] = scale * (c as f64 * dxhat[j] - sum_d - hr[j] * sum_dh);
                    }
                }
                acc(*x, Tensor::from_parts(node.shape.clone(), gx));
                acc(*gn, Tensor::from_parts(vec![c], ggain));
                acc(*b, Tensor::from_parts(vec![c], gbias));
            }
            Op::Reshape(a) => {
                let sa = self.shape(*a).to_vec();
                acc(*a, Tensor::from_parts(sa, g.data().to_vec()));
            }
            Op::Permute(a, perm) => {
                let sa = self.shape(*a).to_vec();
                acc(
                    *a,
                    Tensor::from_parts(sa, permute(g.data(), &node.shape, &inverse_perm(perm))),
                );
            }
            Op::Broadcast(a) => {
                let sa = self.shape(*a).to_vec();
                let n = numel(&sa);
                let mut ga = vec![0.0; n];
                for chunk in g.data().chunks_exact(n) {
                    for (d, &v) in ga.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                acc(*a, Tensor::from_parts(sa, ga));
            }
            Op::Slice(a, axis, start) => {
                let sa = self.shape(*a).to_vec();
                let (outer, dim, inner) = around_axis(&sa, *axis);
                let len = node.shape[*axis];
                let mut ga = vec![0.0; numel(&sa)];
                for o in 0..outer {
                    let base = (o * dim + start) * inner;
                    ga[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*a, Tensor::from_parts(sa, ga));
            }
            Op::GatherRows(a, taps) => {
                let sa = self.shape(*a).to_vec();
                let c = node.shape[1];
                let mut ga = vec![0.0; numel(&sa)];
                for (r, row_taps) in taps.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    for &(dst, w) in row_taps {
                        for (d, &s) in ga[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
                acc(*a, Tensor::from_parts(sa, ga));
            }
            Op::CrossEntropy(a, labels) => {
                let probs = node.saved.as_ref().unwrap();
                let k = probs.shape()[1];
                let scale = g.item() / labels.len() as f64;
                let mut ga = probs.data().to_vec();
                for (r, &label) in labels.iter().enumerate() {
                    ga[r * k + label] -= 1.0;
                }
                ga.iter_mut().for_each(|v| *v *= scale);
                acc(*a, Tensor::from_parts(probs.shape().to_vec(), ga));
            }
            Op::BceWithLogits(a, targets) => {
                let v = self.val(*a);
                let scale = g.item() / v.len() as f64;
                let ga = v.zip_with(targets, |x, y| (sigmoid(x) - y) * scale)?;
                acc(*a, ga);
            }
        }
        Ok(())
    }
}

/// `max(x, 0) - x·y + log(1 + exp(-|x|))`
pub(crate) fn bce_term(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}
