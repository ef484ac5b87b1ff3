//! Parameter storage, deterministic initialization and the basic layers.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{next_id, Ctx, Tape, Var};
use crate::error::{contract_err, shape_err, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Ordered collection of named parameters.
///
/// Registration order is the traversal order used by initialization, the
/// optimizer and parameter counting: tokenizer, positional embedding, then
/// each block (token mixing before channel mixing), final norm, head.
#[derive(Debug, Clone)]
pub struct ParamSet {
    id: u64,
    entries: Vec<ParamEntry>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self { id: next_id(), entries: Vec::new() }
    }

    pub(crate) fn set_id(&self) -> u64 {
        self.id
    }

    pub fn register(&mut self, name: impl Into<String>, kind: ParamKind, shape: &[usize]) -> ParamId {
        let tensor = match kind {
            ParamKind::NormScale => Tensor::full(shape, 1.0),
            _ => Tensor::zeros(shape),
        }
        .with_requires_grad();
        self.entries.push(ParamEntry { name: name.into(), kind, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn assign(&mut self, id: ParamId, values: &Tensor) -> Result<()> {
        let t = &mut self.entries[id.0].tensor;
        if t.shape() != values.shape() {
            return Err(shape_err!("cannot assign {:?} to parameter of shape {:?}", values.shape(), t.shape()));
        }
        t.data_mut().copy_from_slice(values.data());
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Accumulates the gradients of the tape's last backward pass into each
    /// bound parameter's gradient buffer.
    pub fn absorb_grads(&mut self, tape: &Tape) -> Result<()> {
        for (id, var) in tape.param_bindings() {
            if let Some(g) = tape.grad(var) {
                self.entries[id.0].tensor.accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }

    /// Fills every parameter per `policy`, visiting them in registration order.
    pub fn init(&mut self, policy: &InitPolicy) {
        let mut rng = rng::seeded(policy.seed);
        for e in &mut self.entries {
            let fan_in = e.tensor.numel() / e.tensor.shape().first().copied().unwrap_or(1).max(1);
            match e.kind {
                ParamKind::Weight | ParamKind::Embedding => {
                    let sigma = policy.scheme.sigma(fan_in);
                    for v in e.tensor.data_mut() {
                        *v = rng::truncated_normal(&mut rng, sigma, TRUNCATION_BOUND);
                    }
                }
                ParamKind::Bias | ParamKind::NormShift => e.tensor.data_mut().fill(0.0),
                ParamKind::NormScale => e.tensor.data_mut().fill(1.0),
            }
            e.tensor.zero_grad();
        }
    }
}

/// Truncation of the normal initializer, in standard deviations.
pub const TRUNCATION_BOUND: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case", tag = "scheme")]
pub enum InitScheme {
    /// Truncated normal with a fixed standard deviation.
    TruncNormal { sigma: f64 },
    /// Truncated normal with standard deviation `1/sqrt(fan_in)`.
    FanIn,
}

impl InitScheme {
    pub fn sigma(&self, fan_in: usize) -> f64 {
        match *self {
            InitScheme::TruncNormal { sigma } => sigma,
            InitScheme::FanIn => 1.0 / libm::sqrt(fan_in.max(1) as f64),
        }
    }
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::TruncNormal { sigma: 0.02 }
    }
}

/// Weights from `scheme`, zero biases, unit/zero norm affine.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InitPolicy {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitPolicy {
    pub fn new(seed: u64) -> Self {
        Self { scheme: InitScheme::default(), seed }
    }

    pub fn fan_in(seed: u64) -> Self {
        Self { scheme: InitScheme::FanIn, seed }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        alloc::format!("{prefix}.{name}")
    }
}

/// `y = x·Wᵀ + b` along the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, prefix: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: params.register(join(prefix, "weight"), ParamKind::Weight, &[out_features, in_features]),
            bias: params.register(join(prefix, "bias"), ParamKind::Bias, &[out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = cx.shape(x).to_vec();
        if shape.last() != Some(&self.in_features) {
            return Err(shape_err!("linear expects last extent {}, got {shape:?}", self.in_features));
        }
        let rows = shape.iter().product::<usize>() / self.in_features;
        let w = cx.param(self.weight)?;
        let b = cx.param(self.bias)?;
        let x2 = cx.reshape(x, &[rows, self.in_features])?;
        let wt = cx.transpose(w)?;
        let y = cx.matmul(x2, wt)?;
        let y = cx.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_features;
        cx.reshape(y, &out_shape)
    }
}

/// 2D convolution layer (cross-correlation, zero padding).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        Self {
            weight: params.register(join(prefix, "weight"), ParamKind::Weight, &[out_channels, in_channels / groups, kernel, kernel]),
            bias: Some(params.register(join(prefix, "bias"), ParamKind::Bias, &[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        }
    }

    /// Depthwise `k×k` convolution with "same" padding.
    pub fn depthwise(params: &mut ParamSet, prefix: &str, channels: usize, kernel: usize) -> Self {
        Self::new(params, prefix, channels, channels, kernel, 1, kernel / 2, channels)
    }

    pub fn pointwise(params: &mut ParamSet, prefix: &str, in_channels: usize, out_channels: usize) -> Self {
        Self::new(params, prefix, in_channels, out_channels, 1, 1, 0, 1)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight)?;
        let b = self.bias.map(|b| cx.param(b)).transpose()?;
        cx.conv2d(x, w, b, self.stride, self.padding, self.groups)
    }

    /// Output spatial extents for an input of `h×w`.
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Layer norm over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: params.register(join(prefix, "weight"), ParamKind::NormScale, &[dim]),
            beta: params.register(join(prefix, "bias"), ParamKind::NormShift, &[dim]),
            dim,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = cx.param(self.gamma)?;
        let b = cx.param(self.beta)?;
        let axis = cx.value(x).rank() - 1;
        cx.layer_norm(x, g, b, axis, self.eps)
    }
}

/// Multi-head self-attention: fused `C→3C` projection, scaled dot-product
/// attention per head, `C→C` output projection. No class token.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub heads: usize,
    pub head_dim: usize,
    pub qkv: Linear,
    pub proj: Linear,
}

impl Mhsa {
    pub fn new(params: &mut ParamSet, prefix: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err!("embedding dim {dim} is not divisible by {heads} heads"));
        }
        Ok(Self {
            heads,
            head_dim: dim / heads,
            qkv: Linear::new(params, &join(prefix, "qkv"), dim, 3 * dim),
            proj: Linear::new(params, &join(prefix, "proj"), dim, dim),
        })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.head_dim as f64)
    }

    /// Attention core on an already projected `(B,N,3C)` tensor laid out as
    /// `[q | k | v]`. Returns the `(B,N,C)` context and the `(B,heads,N,N)`
    /// attention weights.
    pub fn attend(&self, cx: &mut Ctx<'_>, qkv: Var) -> Result<(Var, Var)> {
        let s = cx.shape(qkv).to_vec();
        let c = self.dim();
        if s.len() != 3 || s[2] != 3 * c {
            return Err(shape_err!("attention expects (B,N,{}) projections, got {s:?}", 3 * c));
        }
        let (b, n) = (s[0], s[1]);
        if n == 0 {
            return Err(contract_err!("attention over zero tokens"));
        }
        let (h, d) = (self.heads, self.head_dim);
        let x = cx.reshape(qkv, &[b, n, 3, h, d])?;
        let x = cx.permute(x, &[2, 0, 3, 1, 4])?;
        let q = cx.narrow(x, 0, 0, 1)?;
        let k = cx.narrow(x, 0, 1, 1)?;
        let v = cx.narrow(x, 0, 2, 1)?;
        let q = cx.reshape(q, &[b, h, n, d])?;
        let k = cx.reshape(k, &[b, h, n, d])?;
        let v = cx.reshape(v, &[b, h, n, d])?;
        let kt = cx.transpose(k)?;
        let scores = cx.matmul(q, kt)?;
        let scores = cx.scale(scores, self.scale())?;
        let attn = cx.softmax(scores, 3)?;
        let out = cx.matmul(attn, v)?;
        let out = cx.permute(out, &[0, 2, 1, 3])?;
        let out = cx.reshape(out, &[b, n, c])?;
        Ok((out, attn))
    }

    pub fn forward_with_attention(&self, cx: &mut Ctx<'_>, x: Var) -> Result<(Var, Var)> {
        let qkv = self.qkv.forward(cx, x)?;
        let (ctx, attn) = self.attend(cx, qkv)?;
        Ok((self.proj.forward(cx, ctx)?, attn))
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(cx, x)?.0)
    }
}
