//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep that
//! visits each node once. Operations save whatever activations their
//! backward rule needs at construction time.
//!
//! Every operation also adds its cost to a FLOP tally under the current
//! scope label (see [`Graph::set_flop_scope`]). Costs are counted as:
//!
//! | operation                          | cost                         |
//! |------------------------------------|------------------------------|
//! | `matmul` `[.., p, q] x [q, r]`     | `batch * p * q * r` (MACs)   |
//! | `add`, `mul`, `scale`              | 1 per output element         |
//! | `relu`, `sigmoid`                  | 1 per element                |
//! | `softmax`, `log_softmax`           | 3 per element                |
//! | `mean`, `sum`                      | 1 per input element          |
//! | `layer_norm`                       | 5 per element                |
//! | `transpose`, `reshape`, `concat`, `slice`, `gather` | 0           |

mod broadcast;
pub mod gradcheck;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, Real, Tensor};

use broadcast::Broadcast;

pub use gradcheck::{grad_check, grad_check_inputs, GradCheckReport};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Mul,
    Div,
    Scale,
    Relu,
    Sigmoid,
    Exp,
    Softmax,
    LogSoftmax,
    Concat,
    Slice,
    Mean,
    Sum,
    LayerNorm,
    Gather,
    Reshape,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 19] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::LayerNorm,
        OpKind::Gather,
        OpKind::Reshape,
    ];
}

enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        batched: bool,
    },
    Transpose {
        a: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
        plan: Broadcast,
    },
    Mul {
        a: NodeId,
        b: NodeId,
        plan: Broadcast,
    },
    Div {
        a: NodeId,
        b: NodeId,
        plan: Broadcast,
    },
    Scale {
        a: NodeId,
        factor: T,
    },
    Relu {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Exp {
        a: NodeId,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    LogSoftmax {
        a: NodeId,
        axis: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        a: NodeId,
        axis: usize,
        start: usize,
    },
    Mean {
        a: NodeId,
        axis: usize,
    },
    Sum {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Reshape {
        a: NodeId,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Div { .. } => OpKind::Div,
            Op::Scale { .. } => OpKind::Scale,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Exp { .. } => OpKind::Exp,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b, .. } | Op::Mul { a, b, .. } | Op::Div { a, b, .. } => {
                vec![*a, *b]
            }
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Sigmoid { a }
            | Op::Exp { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Slice { a, .. }
            | Op::Mean { a, .. }
            | Op::Sum { a }
            | Op::Reshape { a } => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation with values, saved activations and gradients.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    scope: &'static str,
    flops: BTreeMap<&'static str, u64>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            scope: "other",
            flops: BTreeMap::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// Trainable input; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Gradient of the last `backward` loss with respect to `id`, if `id`
    /// requires a gradient.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0)?.as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor<T>> {
        let data = self.grad(id)?.to_vec();
        Tensor::new(self.shape(id).to_vec(), data).ok()
    }

    /// Label under which subsequent operations count their FLOPs. Returns the
    /// previous label.
    pub fn set_flop_scope(&mut self, scope: &'static str) -> &'static str {
        std::mem::replace(&mut self.scope, scope)
    }

    /// FLOPs counted so far, keyed by scope label.
    pub fn flops(&self) -> &BTreeMap<&'static str, u64> {
        &self.flops
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.values().sum()
    }

    /// Make the backward rule of every `kind` node propagate twice the
    /// correct gradient. Negative control for gradient checking only.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn count(&mut self, flops: usize) {
        *self.flops.entry(self.scope).or_insert(0) += flops as u64;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn axis(&self, id: NodeId, axis: isize) -> Result<usize> {
        let rank = self.shape(id).len() as isize;
        let resolved = if axis < 0 { rank + axis } else { axis };
        if resolved < 0 || resolved >= rank {
            return Err(Error::shape(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape(id)
            )));
        }
        Ok(resolved as usize)
    }

    /// Matrix product `a [.., p, q] x b [q, r]`, or a batched product when
    /// `b [.., q, r]` carries the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let fail = || Error::shape(format!("matmul dimension mismatch: {sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(fail());
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if q != q2 {
            return Err(fail());
        }
        let lead = &sa[..sa.len() - 2];
        let batched = sb.len() > 2;
        if batched && &sb[..sb.len() - 2] != lead {
            return Err(fail());
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([p, r]);
        let mut out = vec![T::zero(); batch * p * r];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if batched {
                for i in 0..batch {
                    T::gemm(
                        p,
                        q,
                        r,
                        &av[i * p * q..],
                        q as isize,
                        1,
                        &bv[i * q * r..],
                        r as isize,
                        1,
                        &mut out[i * p * r..(i + 1) * p * r],
                        false,
                    );
                }
            } else {
                T::gemm(batch * p, q, r, av, q as isize, 1, bv, r as isize, 1, &mut out, false);
            }
        }
        self.count(batch * p * q * r);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, batched }))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(format!("transpose needs rank >= 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for block in src.chunks(rows * cols) {
            transpose_into(block, rows, cols, &mut out);
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Transpose { a }))
    }

    /// `a + b`, with `b` broadcast onto `a`'s shape.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let plan = Broadcast::plan(self.shape(a), self.shape(b))?;
        let out = plan.apply(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.count(value.numel());
        Ok(self.push(value, Op::Add { a, b, plan }))
    }

    /// Elementwise `a * b`, with `b` broadcast onto `a`'s shape.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let plan = Broadcast::plan(self.shape(a), self.shape(b))?;
        let out = plan.apply(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.count(value.numel());
        Ok(self.push(value, Op::Mul { a, b, plan }))
    }

    /// Elementwise `a / b`, with `b` broadcast onto `a`'s shape.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let plan = Broadcast::plan(self.shape(a), self.shape(b))?;
        let out = plan.apply(self.value(a).data(), self.value(b).data(), |x, y| x / y);
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.count(value.numel());
        Ok(self.push(value, Op::Div { a, b, plan }))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        let value = self.value(a).map(|x| x * factor);
        self.count(value.numel());
        Ok(self.push(value, Op::Scale { a, factor }))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.count(value.numel());
        Ok(self.push(value, Op::Relu { a }))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(sigmoid);
        self.count(value.numel());
        Ok(self.push(value, Op::Sigmoid { a }))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).map(|x| x.exp());
        self.count(value.numel());
        Ok(self.push(value, Op::Exp { a }))
    }

    /// Softmax along `axis` (negative counts from the end), computed with
    /// the max-subtraction trick.
    pub fn softmax(&mut self, a: NodeId, axis: isize) -> Result<NodeId> {
        let axis = self.axis(a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = axis_extents(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(out[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (out[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.count(3 * value.numel());
        Ok(self.push(value, Op::Softmax { a, axis }))
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: NodeId, axis: isize) -> Result<NodeId> {
        let axis = self.axis(a, axis)?;
        let x = self.value(a);
        let (outer, len, inner) = axis_extents(x.shape(), axis);
        let mut out = x.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(out[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    sum += (out[base + l * inner] - max).exp();
                }
                let log_z = max + sum.ln();
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] - log_z;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.count(3 * value.numel());
        Ok(self.push(value, Op::LogSoftmax { a, axis }))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: isize) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::shape("concat of an empty list"))?;
        let axis = self.axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &id in inputs {
            let s = self.shape(id);
            let agrees =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: shape {s:?} disagrees with {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &id in inputs {
                let len = self.shape(id)[axis] * inner;
                out.extend_from_slice(&self.value(id).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: NodeId, axis: isize, start: usize, len: usize) -> Result<NodeId> {
        let axis = self.axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice {start}..{} out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Slice { a, axis, start }))
    }

    /// Arithmetic mean along `axis`, removing that axis.
    pub fn mean(&mut self, a: NodeId, axis: isize) -> Result<NodeId> {
        let axis = self.axis(a, axis)?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let n = T::from_usize(len).expect("axis length fits the float type");
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x = *x / n);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        self.count(outer * len * inner);
        Ok(self.push(value, Op::Mean { a, axis }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: T = self.value(a).data().iter().copied().sum();
        let numel = self.value(a).numel();
        self.count(numel);
        Ok(self.push(Tensor::scalar(total), Op::Sum { a }))
    }

    /// Normalize every vector along the last axis to zero mean and unit
    /// (population) variance, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        if eps <= T::zero() {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm needs rank >= 1"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::shape(format!(
                    "layer_norm affine parameter has shape {:?}, expected [{d}]",
                    self.shape(p)
                )));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let dn = T::from_usize(d).expect("width fits the float type");
        let rows = src.len() / d;
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for ((&v, &gi), &bi) in row.iter().zip(g).zip(b) {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gi + bi);
            }
        }
        let value = Tensor::new(shape, out)?;
        self.count(5 * value.numel());
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Rows of `table [V, D]` selected by `ids`, giving `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(format!("gather_rows needs a matrix, got {shape:?}")));
        }
        if ids.is_empty() {
            return Err(Error::shape("gather_rows with no ids"));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("row id {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Populate gradients of every node that requires one with respect to the
    /// single-element tensor `loss`. Nodes the loss does not depend on get
    /// zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a single-element loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let upstream = if self.fault == Some(node.op.kind()) {
                upstream.iter().map(|&g| g + g).collect()
            } else {
                upstream
            };
            self.propagate(i, &upstream, &mut grads);
            grads[i] = Some(upstream);
        }
        for (node, grad) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && grad.is_none() {
                *grad = Some(vec![T::zero(); node.value.numel()]);
            }
            if !node.requires_grad {
                *grad = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |id: NodeId| nodes[id.0].requires_grad;
        let val = |id: NodeId| nodes[id.0].value.data();
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, batched } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let r = sb[sb.len() - 1];
                let batch = nodes[a.0].value.numel() / (p * q);
                if wants(*a) {
                    // dA = dC . B^T
                    let bv = val(*b);
                    let da = buffer(grads, nodes, *a);
                    if *batched {
                        for k in 0..batch {
                            T::gemm(
                                p,
                                r,
                                q,
                                &g[k * p * r..],
                                r as isize,
                                1,
                                &bv[k * q * r..],
                                1,
                                r as isize,
                                &mut da[k * p * q..(k + 1) * p * q],
                                true,
                            );
                        }
                    } else {
                        T::gemm(batch * p, r, q, g, r as isize, 1, bv, 1, r as isize, da, true);
                    }
                }
                if wants(*b) {
                    // dB = A^T . dC, summed over the batch for a shared B.
                    let av = val(*a);
                    let db = buffer(grads, nodes, *b);
                    if *batched {
                        for k in 0..batch {
                            T::gemm(
                                q,
                                p,
                                r,
                                &av[k * p * q..],
                                1,
                                q as isize,
                                &g[k * p * r..],
                                r as isize,
                                1,
                                &mut db[k * q * r..(k + 1) * q * r],
                                true,
                            );
                        }
                    } else {
                        T::gemm(q, batch * p, r, av, 1, q as isize, g, r as isize, 1, db, true);
                    }
                }
            }
            Op::Transpose { a } => {
                if wants(*a) {
                    let s = out.shape();
                    let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
                    let mut t = Vec::with_capacity(g.len());
                    for block in g.chunks(rows * cols) {
                        transpose_into(block, rows, cols, &mut t);
                    }
                    add_into(buffer(grads, nodes, *a), &t);
                }
            }
            Op::Add { a, b, plan } => {
                if wants(*a) {
                    add_into(buffer(grads, nodes, *a), g);
                }
                if wants(*b) {
                    let db = buffer(grads, nodes, *b);
                    for (k, &gk) in g.iter().enumerate() {
                        db[plan.right_index(k)] += gk;
                    }
                }
            }
            Op::Mul { a, b, plan } => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let da = buffer(grads, nodes, *a);
                    for (k, &gk) in g.iter().enumerate() {
                        da[k] += gk * bv[plan.right_index(k)];
                    }
                }
                if wants(*b) {
                    let db = buffer(grads, nodes, *b);
                    for (k, &gk) in g.iter().enumerate() {
                        db[plan.right_index(k)] += gk * av[k];
                    }
                }
            }
            Op::Div { a, b, plan } => {
                let bv = val(*b);
                if wants(*a) {
                    let da = buffer(grads, nodes, *a);
                    for (k, &gk) in g.iter().enumerate() {
                        da[k] += gk / bv[plan.right_index(k)];
                    }
                }
                if wants(*b) {
                    // d(a / b)/db = -(a / b) / b
                    let y = out.data();
                    let db = buffer(grads, nodes, *b);
                    for (k, &gk) in g.iter().enumerate() {
                        let j = plan.right_index(k);
                        db[j] += -(gk * y[k] / bv[j]);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    let da = buffer(grads, nodes, *a);
                    for (d, &gk) in da.iter_mut().zip(g) {
                        *d += gk * *factor;
                    }
                }
            }
            Op::Relu { a } => {
                if wants(*a) {
                    let x = val(*a);
                    let da = buffer(grads, nodes, *a);
                    for ((d, &gk), &xk) in da.iter_mut().zip(g).zip(x) {
                        if xk > T::zero() {
                            *d += gk;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if wants(*a) {
                    let y = out.data();
                    let da = buffer(grads, nodes, *a);
                    for ((d, &gk), &yk) in da.iter_mut().zip(g).zip(y) {
                        *d += gk * yk * (T::one() - yk);
                    }
                }
            }
            Op::Exp { a } => {
                if wants(*a) {
                    let y = out.data();
                    let da = buffer(grads, nodes, *a);
                    for ((d, &gk), &yk) in da.iter_mut().zip(g).zip(y) {
                        *d += gk * yk;
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if wants(*a) {
                    let y = out.data();
                    let (outer, len, inner) = axis_extents(out.shape(), *axis);
                    let da = buffer(grads, nodes, *a);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut dot = T::zero();
                            for l in 0..len {
                                let k = base + l * inner;
                                dot += g[k] * y[k];
                            }
                            for l in 0..len {
                                let k = base + l * inner;
                                da[k] += y[k] * (g[k] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { a, axis } => {
                if wants(*a) {
                    let y = out.data();
                    let (outer, len, inner) = axis_extents(out.shape(), *axis);
                    let da = buffer(grads, nodes, *a);
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let mut total = T::zero();
                            for l in 0..len {
                                total += g[base + l * inner];
                            }
                            for l in 0..len {
                                let k = base + l * inner;
                                da[k] += g[k] - y[k].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &id in inputs {
                    let len = nodes[id.0].value.shape()[*axis];
                    if wants(id) {
                        let d = buffer(grads, nodes, id);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(
                                &mut d[o * len * inner..(o + 1) * len * inner],
                                &g[from..from + len * inner],
                            );
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                if wants(*a) {
                    let full = nodes[a.0].value.shape()[*axis];
                    let (outer, len, inner) = axis_extents(out.shape(), *axis);
                    let da = buffer(grads, nodes, *a);
                    for o in 0..outer {
                        let to = (o * full + start) * inner;
                        add_into(
                            &mut da[to..to + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Mean { a, axis } => {
                if wants(*a) {
                    let (outer, len, inner) = axis_extents(nodes[a.0].value.shape(), *axis);
                    let n = T::from_usize(len).expect("axis length fits the float type");
                    let da = buffer(grads, nodes, *a);
                    for o in 0..outer {
                        for l in 0..len {
                            let row = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &gk) in row.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += gk / n;
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let g0 = g[0];
                    buffer(grads, nodes, *a).iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out.shape().last().expect("rank >= 1");
                if wants(*gain) {
                    let dg = buffer(grads, nodes, *gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, &gk), &hk) in dg.iter_mut().zip(grow).zip(hrow) {
                            *acc += gk * hk;
                        }
                    }
                }
                if wants(*bias) {
                    let db = buffer(grads, nodes, *bias);
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                }
                if wants(*x) {
                    let gv = val(*gain);
                    let dn = T::from_usize(d).expect("width fits the float type");
                    let dx = buffer(grads, nodes, *x);
                    for (row, ((grow, hrow), &r)) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd.iter()).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for k in 0..d {
                            let dh = grow[k] * gv[k];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[k];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        let target = &mut dx[row * d..(row + 1) * d];
                        for k in 0..d {
                            let dh = grow[k] * gv[k];
                            target[k] += r * (dh - mean_dh - hrow[k] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = nodes[table.0].value.shape()[1];
                    let dt = buffer(grads, nodes, *table);
                    for (k, &row) in ids.iter().enumerate() {
                        add_into(&mut dt[row * d..(row + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    add_into(buffer(grads, nodes, *a), g);
                }
            }
        }
    }
}

fn buffer<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: NodeId) -> &'a mut Vec<T> {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.numel()])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_into<T: Copy>(block: &[T], rows: usize, cols: usize, out: &mut Vec<T>) {
    for c in 0..cols {
        for r in 0..rows {
            out.push(block[r * cols + c]);
        }
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests;
