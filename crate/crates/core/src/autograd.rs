//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! whatever it needs for the backward pass. [`Tape::backward`] replays the
//! nodes in reverse exactly once; a second call is rejected until the tape is
//! [reset](Tape::reset).

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::nn::{ParamId, ParamSet};
use crate::tensor::{self, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Constant of the tanh approximation of GELU, `sqrt(2/π)` to ten digits.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.7978845608;
const GELU_CUBIC: f64 = 0.044715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    Reshape,
    Permute,
    Narrow,
    MatMul,
    Conv2d,
    Gelu,
    Softmax,
    LayerNorm,
    Mean,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 15] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Narrow,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Gelu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::Narrow => "narrow",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Deliberate corruption of one operation's backward rule. Used as the
/// negative control of the gradient checks; never set in normal use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradFault {
    pub op: OpKind,
    pub factor: f64,
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Narrow { a: usize, axis: usize, start: usize },
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Conv2d { x: usize, w: usize, bias: Option<usize>, geom: ConvGeometry },
    Gelu { a: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, axis: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Mean { a: usize, axis: usize },
    Sum { a: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (tensor::numel(&shape[..axis]), shape[axis], tensor::numel(&shape[axis + 1..]))
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric(alloc::format!(
            "{what} received non-finite input {} at flat index {i}",
            t.data()[i]
        ))),
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + libm::tanh(u))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = libm::tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Recorded computation. Single owner; not meant to be shared across threads
/// during a backward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    macs: u64,
    param_set: Option<u64>,
    param_vars: Vec<Option<Var>>,
    fault: Option<GradFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: next_id(),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            macs: 0,
            param_set: None,
            param_vars: Vec::new(),
            fault: None,
        }
    }

    /// Clears all recorded nodes, gradients and counters. Handles issued
    /// before the reset become invalid.
    pub fn reset(&mut self) {
        let fault = self.fault;
        *self = Self::new();
        self.fault = fault;
    }

    pub fn inject_fault(&mut self, fault: Option<GradFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by matmul and convolution nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Sequence of operation kinds recorded so far.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(contract_err!("variable does not belong to this tape"));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var { idx: self.nodes.len() - 1, tape: self.id }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Binds parameter `id` of `params` to a leaf, reusing the leaf when the
    /// same parameter is requested again.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<Var> {
        match self.param_set {
            None => {
                self.param_set = Some(params.set_id());
                self.param_vars = vec![None; params.len()];
            }
            Some(s) if s != params.set_id() => {
                return Err(contract_err!("tape is already bound to a different parameter set"));
            }
            Some(_) => {}
        }
        if id.index() >= self.param_vars.len() {
            self.param_vars.resize(params.len(), None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return Ok(v);
        }
        let v = self.leaf(params.tensor(id).clone());
        self.param_vars[id.index()] = Some(v);
        Ok(v)
    }

    /// Leaf variables bound to parameters, in parameter order.
    pub fn param_bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("foreign variable");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.check(v).ok()?;
        let g = self.grads.get(i)?.as_ref()?;
        Tensor::new(self.nodes[i].value.shape(), g.clone()).ok()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut ia, mut ib) = (self.check(a)?, self.check(b)?);
        let suffix = |big: &[usize], small: &[usize]| big.len() >= small.len() && big.ends_with(small);
        if !suffix(self.nodes[ia].value.shape(), self.nodes[ib].value.shape()) {
            if suffix(self.nodes[ib].value.shape(), self.nodes[ia].value.shape()) {
                core::mem::swap(&mut ia, &mut ib);
            } else {
                return Err(shape_err!(
                    "cannot add {:?} and {:?}",
                    self.nodes[ia].value.shape(),
                    self.nodes[ib].value.shape()
                ));
            }
        }
        let mut out = self.nodes[ia].value.detached();
        let bdata = self.nodes[ib].value.data();
        let inner = bdata.len();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(bdata) {
                *o += v;
            }
        }
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Add { a: ia, b: ib }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(shape_err!("cannot multiply {:?} and {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::Mul { a: ia, b: ib }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(|v| v * factor);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Scale { a: ia, factor }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.detached().into_reshape(shape)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Reshape { a: ia }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.permute(perm)?.detached();
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Permute { a: ia, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", self.value(a).shape()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        if axis >= src.rank() || len == 0 || start + len > src.shape()[axis] {
            return Err(shape_err!("cannot take [{start}, {}) of axis {axis} in {:?}", start + len, src.shape()));
        }
        let (outer, extent, inner) = split_axis(src.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Narrow { a: ia, axis, start }, rg))
    }

    /// Matrix product over the last two axes. `b` is either rank 2 (shared by
    /// every batch entry of `a`) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err!("matmul inner extents disagree: {sa:?} x {sb:?}"));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && &sb[..sb.len() - 2] != lead {
            return Err(shape_err!("matmul batch extents disagree: {sa:?} x {sb:?}"));
        }
        let batch = tensor::numel(lead);
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&[m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
            for bi in 0..batch {
                let bsl = if shared_b { db } else { &db[bi * k * n..(bi + 1) * k * n] };
                kernels::matmul_acc(&da[bi * m * k..(bi + 1) * m * k], bsl, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul { a: ia, b: ib, batch, m, k, n, shared_b }, rg))
    }

    /// Grouped, strided, zero-padded 2D cross-correlation of `x` (B,Cin,H,W)
    /// with `w` (Cout,Cin/groups,kh,kw).
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let geom = ConvGeometry::new(self.nodes[ix].value.shape(), self.nodes[iw].value.shape(), stride, padding, groups)?;
        if let Some(ib) = ib {
            if self.nodes[ib].value.shape() != [geom.out_channels] {
                return Err(shape_err!(
                    "conv bias {:?} does not match {} output channels",
                    self.nodes[ib].value.shape(),
                    geom.out_channels
                ));
            }
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
        );
        self.macs += geom.macs();
        let out = Tensor::new(&geom.out_shape(), data)?;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        Ok(self.push(out, Op::Conv2d { x: ix, w: iw, bias: ib, geom }, rg))
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        ensure_finite(&self.nodes[ia].value, "gelu")?;
        let out = self.nodes[ia].value.map(gelu);
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Gelu { a: ia }, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        if axis >= src.rank() {
            return Err(shape_err!("softmax axis {axis} out of range for {:?}", src.shape()));
        }
        ensure_finite(src, "softmax")?;
        let (outer, extent, inner) = split_axis(src.shape(), axis);
        let mut out = src.detached();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * extent + i) * inner + j;
                let max = (0..extent).map(|i| d[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..extent {
                    let e = libm::exp(d[at(i)] - max);
                    d[at(i)] = e;
                    sum += e;
                }
                for i in 0..extent {
                    d[at(i)] /= sum;
                }
            }
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Softmax { a: ia, axis }, rg))
    }

    /// Normalizes every slice along `axis` to zero mean and unit (biased)
    /// variance, then applies `gamma`/`beta` (both shaped `[extent]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        if !(eps > 0.0) {
            return Err(contract_err!("layer norm epsilon must be positive, got {eps}"));
        }
        let src = &self.nodes[ix].value;
        if axis >= src.rank() {
            return Err(shape_err!("layer norm axis {axis} out of range for {:?}", src.shape()));
        }
        ensure_finite(src, "layer_norm")?;
        let (outer, extent, inner) = split_axis(src.shape(), axis);
        let (g, b) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        if g.len() != extent || b.len() != extent {
            return Err(shape_err!(
                "layer norm affine {:?}/{:?} does not match extent {extent}",
                self.nodes[ig].value.shape(),
                self.nodes[ib].value.shape()
            ));
        }
        let d = src.data();
        let mut xhat = vec![0.0; d.len()];
        let mut out = vec![0.0; d.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * extent + i) * inner + j;
                let mean = (0..extent).map(|i| d[at(i)]).sum::<f64>() / extent as f64;
                let var = (0..extent).map(|i| { let e = d[at(i)] - mean; e * e }).sum::<f64>() / extent as f64;
                let r = 1.0 / libm::sqrt(var + eps);
                rstd[o * inner + j] = r;
                for i in 0..extent {
                    let h = (d[at(i)] - mean) * r;
                    xhat[at(i)] = h;
                    out[at(i)] = h * g[i] + b[i];
                }
            }
        }
        let out = Tensor::new(src.shape(), out)?;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        Ok(self.push(out, Op::LayerNorm { x: ix, gamma: ig, beta: ib, axis, xhat, rstd }, rg))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        if axis >= src.rank() {
            return Err(shape_err!("mean axis {axis} out of range for {:?}", src.shape()));
        }
        let (outer, extent, inner) = split_axis(src.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..extent {
                for j in 0..inner {
                    data[o * inner + j] += src.data()[(o * extent + i) * inner + j];
                }
            }
        }
        data.iter_mut().for_each(|v| *v /= extent as f64);
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Mean { a: ia, axis }, rg))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: ia }, rg))
    }

    /// Mean softmax cross-entropy of `logits` (B,K) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let src = &self.nodes[il].value;
        if src.rank() != 2 || src.shape()[0] != targets.len() {
            return Err(shape_err!("cross entropy expects (B,K) logits for {} targets, got {:?}", targets.len(), src.shape()));
        }
        ensure_finite(src, "cross_entropy")?;
        let (b, k) = (src.shape()[0], src.shape()[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(contract_err!("target class {t} out of range for {k} classes"));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
            let lse = max + libm::log(sum);
            loss += lse - row[t];
            for c in 0..k {
                probs[r * k + c] = libm::exp(row[c] - lse);
            }
        }
        let rg = self.rg(il);
        Ok(self.push(Tensor::scalar(loss / b as f64), Op::CrossEntropy { logits: il, targets: targets.to_vec(), probs }, rg))
    }

    /// Populates gradients of the single-element `loss` with respect to every
    /// node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.backward_done {
            return Err(contract_err!("backward already ran on this tape; reset it first"));
        }
        if self.nodes[il].value.numel() != 1 {
            return Err(contract_err!("loss must be a single element, got shape {:?}", self.nodes[il].value.shape()));
        }
        if !self.nodes[il].requires_grad {
            return Err(contract_err!("loss is detached: no input on its path requires a gradient"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                let contributions = self.node_backward(i, &g);
                let factor = match self.fault {
                    Some(f) if f.op == self.nodes[i].op.kind() => f.factor,
                    _ => 1.0,
                };
                for (parent, mut delta) in contributions {
                    if !self.nodes[parent].requires_grad {
                        continue;
                    }
                    if factor != 1.0 {
                        delta.iter_mut().for_each(|v| *v *= factor);
                    }
                    match &mut self.grads[parent] {
                        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                        slot @ None => *slot = Some(delta),
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add { a, b } => {
                let inner = val(*b).numel();
                let mut db = vec![0.0; inner];
                for chunk in g.chunks(inner) {
                    db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                vec![(*a, g.to_vec()), (*b, db)]
            }
            Op::Mul { a, b } => {
                let da = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let db = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { a, factor } => vec![(*a, g.iter().map(|v| v * factor).collect())],
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Permute { a, perm } => {
                let inv = tensor::inverse_perm(perm);
                vec![(*a, tensor::permute_data(g, node.value.shape(), &inv))]
            }
            Op::Narrow { a, axis, start } => {
                let src_shape = val(*a).shape();
                let (outer, extent, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut da = vec![0.0; val(*a).numel()];
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    da[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, da)]
            }
            Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let (da_src, db_src) = (val(*a).data(), val(*b).data());
                let (m, k, n) = (*m, *k, *n);
                let mut da = vec![0.0; da_src.len()];
                let mut db = vec![0.0; db_src.len()];
                for bi in 0..*batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let brange = if *shared_b { 0..k * n } else { bi * k * n..(bi + 1) * k * n };
                    kernels::matmul_nt_acc(gs, &db_src[brange.clone()], &mut da[bi * m * k..(bi + 1) * m * k], m, k, n);
                    kernels::matmul_tn_acc(&da_src[bi * m * k..(bi + 1) * m * k], gs, &mut db[brange], m, k, n);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Conv2d { x, w, bias, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), g);
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::Gelu { a } => vec![(*a, g.iter().zip(val(*a).data()).map(|(g, &x)| g * gelu_grad(x)).collect())],
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, extent, inner) = split_axis(node.value.shape(), *axis);
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |t: usize| (o * extent + t) * inner + j;
                        let dot: f64 = (0..extent).map(|t| g[at(t)] * y[at(t)]).sum();
                        for t in 0..extent {
                            da[at(t)] = y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
                vec![(*a, da)]
            }
            Op::LayerNorm { x, gamma, beta, axis, xhat, rstd } => {
                let (outer, extent, inner) = split_axis(node.value.shape(), *axis);
                let gam = val(*gamma).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; extent];
                let mut db = vec![0.0; extent];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |t: usize| (o * extent + t) * inner + j;
                        let (mut mean_dh, mut mean_dh_h) = (0.0, 0.0);
                        for t in 0..extent {
                            let dh = g[at(t)] * gam[t];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[at(t)];
                            dg[t] += g[at(t)] * xhat[at(t)];
                            db[t] += g[at(t)];
                        }
                        mean_dh /= extent as f64;
                        mean_dh_h /= extent as f64;
                        let r = rstd[o * inner + j];
                        for t in 0..extent {
                            let dh = g[at(t)] * gam[t];
                            dx[at(t)] = r * (dh - mean_dh - xhat[at(t)] * mean_dh_h);
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Mean { a, axis } => {
                let (outer, extent, inner) = split_axis(val(*a).shape(), *axis);
                let mut da = vec![0.0; val(*a).numel()];
                for o in 0..outer {
                    for t in 0..extent {
                        for j in 0..inner {
                            da[(o * extent + t) * inner + j] = g[o * inner + j] / extent as f64;
                        }
                    }
                }
                vec![(*a, da)]
            }
            Op::Sum { a } => vec![(*a, vec![g[0]; val(*a).numel()])],
            Op::CrossEntropy { logits, targets, probs } => {
                let b = targets.len();
                let k = probs.len() / b;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= g[0] / b as f64);
                vec![(*logits, d)]
            }
        }
    }
}

/// A tape paired with the parameter set that layers read from.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamSet,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamSet) -> Self {
        Self { tape, params }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.tape.param(self.params, id)
    }
}

impl Deref for Ctx<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        self.tape
    }
}

impl DerefMut for Ctx<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        self.tape
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(t: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        t.leaf(Tensor::new(shape, data.to_vec()).unwrap().with_requires_grad())
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = var(&mut t, &[3], &[0.5, -1.0, 2.0]);
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut t = Tape::new();
        let x = var(&mut t, &[2], &[1.0, 2.0]);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_is_rejected() {
        let mut t = Tape::new();
        let x = var(&mut t, &[2], &[1.0, 2.0]);
        let l = t.sum(x).unwrap();
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_and_detached_losses_are_rejected() {
        let mut t = Tape::new();
        let x = var(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let c = t.constant(Tensor::new(&[2], alloc::vec![1.0, 2.0]).unwrap());
        let l = t.sum(c).unwrap();
        assert!(matches!(t.backward(l), Err(Error::Contract(_))));
        let mut other = Tape::new();
        assert!(matches!(other.backward(l), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_hand_values() {
        let mut t = Tape::new();
        let a = var(&mut t, &[1, 2], &[1.0, 2.0]);
        let b = var(&mut t, &[2, 1], &[3.0, 4.0]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
        let bad = var(&mut t, &[3, 1], &[1.0, 1.0, 1.0]);
        assert!(matches!(t.matmul(a, bad), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut t = Tape::new();
        let x = var(&mut t, &[1, 4], &[3.0; 4]);
        let y = t.softmax(x, 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut t = Tape::new();
        let x = var(&mut t, &[4], &[1.0, 2.0, 3.0, 4.0]);
        let g = t.constant(Tensor::full(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let eps = 1e-5;
        let y = t.layer_norm(x, g, b, 0, eps).unwrap();
        let d = t.value(y).data();
        let mean = d.iter().sum::<f64>() / 4.0;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // the raw variance of [1,2,3,4] is 1.25
        assert!((var - 1.25 / (1.25 + eps)).abs() < 1e-12);
        assert!(t.layer_norm(x, g, b, 0, 0.0).is_err());
    }

    #[test]
    fn gelu_closed_form_values() {
        assert_eq!(gelu(0.0), 0.0);
        // 0.5·3·(1 + tanh(0.7978845608·(3 + 0.044715·27))) evaluated at high precision
        assert!((gelu(3.0) - 2.996_362_607_918_139).abs() < 1e-9);
    }

    #[test]
    fn non_finite_inputs_are_reported() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2], alloc::vec![1.0, f64::NAN]).unwrap());
        assert!(matches!(t.gelu(x), Err(Error::Numeric(_))));
        assert!(matches!(t.softmax(x, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn broadcast_add_reduces_grad() {
        let mut t = Tape::new();
        let x = var(&mut t, &[2, 3], &[0.0; 6]);
        let b = var(&mut t, &[3], &[1.0, 2.0, 3.0]);
        let y = t.add(x, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
