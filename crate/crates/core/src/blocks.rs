//! Baseline and structure-aware mixing blocks, and model assembly.
//!
//! Every sublayer is pre-norm with a residual connection: `x + f(LN(x))`.
//! Tokens travel as `(B, N, C)` with `N = Ht·Wt` numbered row-major.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Ctx, Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{Conv2d, InitPolicy, LayerNorm, Linear, Mhsa, ParamId, ParamKind, ParamSet};
use crate::tensor::Tensor;
use crate::tokenizer::{StemConfig, StructureDescriptor, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Transformer,
    Mixer,
}

/// Declarative model description. The three `swat_*` flags are the
/// independent ablation axes; every combination builds.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub embed: usize,
    /// Attention heads (transformer only).
    pub heads: usize,
    /// Hidden token count `D_t` of mixer token mixing.
    pub token_hidden: usize,
    /// Hidden width `D_c` of channel mixing.
    pub channel_hidden: usize,
    pub patch: usize,
    pub alpha: usize,
    pub token_mix_kernel: usize,
    pub channel_mix_kernel: usize,
    pub pos_emb: bool,
    pub classes: usize,
    pub image_size: usize,
    pub swat_tokenize: bool,
    pub swat_token_mix: bool,
    pub swat_channel_mix: bool,
}

impl ModelConfig {
    fn transformer(embed: usize, depth: usize, heads: usize, patch: usize, alpha: usize) -> Self {
        Self {
            variant: Variant::Transformer,
            depth,
            embed,
            heads,
            token_hidden: 0,
            channel_hidden: 4 * embed,
            patch,
            alpha,
            token_mix_kernel: 3,
            channel_mix_kernel: 5,
            pos_emb: true,
            classes: 1000,
            image_size: 224,
            swat_tokenize: false,
            swat_token_mix: false,
            swat_channel_mix: false,
        }
    }

    fn mixer(embed: usize, depth: usize, token_hidden: usize, channel_hidden: usize, patch: usize, alpha: usize) -> Self {
        Self {
            variant: Variant::Mixer,
            depth,
            embed,
            heads: 1,
            token_hidden,
            channel_hidden,
            patch,
            alpha,
            token_mix_kernel: 3,
            channel_mix_kernel: 5,
            pos_emb: false,
            classes: 1000,
            image_size: 224,
            swat_tokenize: false,
            swat_token_mix: false,
            swat_channel_mix: false,
        }
    }

    /// DeiT-Ti: C=192, 12 blocks, 3 heads, p=16.
    pub fn deit_ti() -> Self {
        Self::transformer(192, 12, 3, 16, 8)
    }

    /// DeiT-S: C=384, 12 blocks, 6 heads, p=16.
    pub fn deit_s() -> Self {
        Self::transformer(384, 12, 6, 16, 8)
    }

    /// DeiT-B/32: C=768, 12 blocks, 12 heads, p=32.
    pub fn deit_b32() -> Self {
        Self::transformer(768, 12, 12, 32, 16)
    }

    /// Mixer-S/16: C=512, 8 blocks, D_t=256, D_c=2048.
    pub fn mixer_s16() -> Self {
        Self::mixer(512, 8, 256, 2048, 16, 8)
    }

    /// Mixer-Ti: C=256, 8 blocks, D_t=128, D_c=1024, p=16.
    pub fn mixer_ti() -> Self {
        Self::mixer(256, 8, 128, 1024, 16, 8)
    }

    /// Two-block mixer on 32×32 images with 8×8 patches and 2×2 structure.
    pub fn tiny_mixer() -> Self {
        Self { classes: 4, image_size: 32, ..Self::mixer(16, 2, 16, 32, 8, 2) }
    }

    /// Two-block transformer on 32×32 images with 8×8 patches and 2×2 structure.
    pub fn tiny_deit() -> Self {
        Self { classes: 4, image_size: 32, channel_hidden: 32, ..Self::transformer(16, 2, 2, 8, 2) }
    }

    /// Turns on all three structure-aware components.
    pub fn swat(mut self) -> Self {
        self.swat_tokenize = true;
        self.swat_token_mix = true;
        self.swat_channel_mix = true;
        self
    }

    pub fn baseline(mut self) -> Self {
        self.swat_tokenize = false;
        self.swat_token_mix = false;
        self.swat_channel_mix = false;
        self
    }

    pub fn any_swat(&self) -> bool {
        self.swat_tokenize || self.swat_token_mix || self.swat_channel_mix
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size / self.patch, self.image_size / self.patch)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn structure(&self) -> Result<StructureDescriptor> {
        StructureDescriptor::new(self.patch, self.alpha, self.embed)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("embed", self.embed),
            ("channel_hidden", self.channel_hidden),
            ("patch", self.patch),
            ("alpha", self.alpha),
            ("classes", self.classes),
            ("image_size", self.image_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("{name} must be positive"));
        }
        if self.image_size % self.patch != 0 {
            return Err(shape_err!("image size {} is not divisible by patch size {}", self.image_size, self.patch));
        }
        match self.variant {
            Variant::Transformer => {
                if self.heads == 0 || self.embed % self.heads != 0 {
                    return Err(config_err!("embed {} is not divisible by {} heads", self.embed, self.heads));
                }
            }
            Variant::Mixer => {
                if self.token_hidden == 0 {
                    return Err(config_err!("mixer needs a positive token_hidden"));
                }
            }
        }
        for (name, k) in [("token_mix_kernel", self.token_mix_kernel), ("channel_mix_kernel", self.channel_mix_kernel)] {
            if k % 2 == 0 {
                return Err(config_err!("{name} must be odd, got {k}"));
            }
        }
        self.structure()?;
        Ok(())
    }
}

/// Pre-norm residual wrapper shared by every sublayer.
fn residual(cx: &mut Ctx<'_>, x: Var, branch: Var) -> Result<Var> {
    cx.add(x, branch)
}

fn dims3(cx: &Ctx<'_>, x: Var) -> Result<(usize, usize, usize)> {
    match *cx.shape(x) {
        [b, n, c] => Ok((b, n, c)),
        ref s => Err(shape_err!("expected (B,N,C) tokens, got {s:?}")),
    }
}

/// LN → MHSA → residual.
#[derive(Debug, Clone)]
pub struct AttentionMix {
    pub norm: LayerNorm,
    pub attn: Mhsa,
}

impl AttentionMix {
    pub fn new(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(params, &alloc::format!("{prefix}.norm"), cfg.embed),
            attn: Mhsa::new(params, &alloc::format!("{prefix}.attn"), cfg.embed, cfg.heads)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, attn_out: Option<&mut Vec<Var>>) -> Result<Var> {
        let h = self.norm.forward(cx, x)?;
        let (y, a) = self.attn.forward_with_attention(cx, h)?;
        if let Some(sink) = attn_out {
            sink.push(a);
        }
        residual(cx, x, y)
    }
}

/// Weight applied to each of the two parallel projection branches.
pub const BRANCH_SCALE: f64 = 0.5;

/// Attention whose `qkv` and output projections each run a `3×3` convolution
/// over the within-token `c×h×w` layout in parallel with the linear map; the
/// two branches are summed with weight 0.5 each.
#[derive(Debug, Clone)]
pub struct SwatAttentionMix {
    pub norm: LayerNorm,
    pub attn: Mhsa,
    pub qkv_conv: Conv2d,
    pub proj_conv: Conv2d,
    pub desc: StructureDescriptor,
}

impl SwatAttentionMix {
    pub fn new(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig, desc: StructureDescriptor) -> Result<Self> {
        let k = cfg.token_mix_kernel;
        let norm = LayerNorm::new(params, &alloc::format!("{prefix}.norm"), cfg.embed);
        let attn = Mhsa::new(params, &alloc::format!("{prefix}.attn"), cfg.embed, cfg.heads)?;
        let qkv_conv = Conv2d::new(params, &alloc::format!("{prefix}.attn.qkv_conv"), desc.c, 3 * desc.c, k, 1, k / 2, 1);
        let proj_conv = Conv2d::new(params, &alloc::format!("{prefix}.attn.proj_conv"), desc.c, desc.c, k, 1, k / 2, 1);
        Ok(Self { norm, attn, qkv_conv, proj_conv, desc })
    }

    /// `0.5·linear(x) + 0.5·conv(x viewed as (BN, c, h, w))`.
    fn parallel(&self, cx: &mut Ctx<'_>, x: Var, linear: &Linear, conv: &Conv2d) -> Result<Var> {
        let (b, n, c) = dims3(cx, x)?;
        let d = self.desc;
        if c != d.embed() {
            return Err(Error::Structure(alloc::format!("C = {c} does not factor as c·h·w = {}·{}·{}", d.c, d.h, d.w)));
        }
        let lin = linear.forward(cx, x)?;
        let lin = cx.scale(lin, BRANCH_SCALE)?;
        let xr = cx.reshape(x, &[b * n, d.c, d.h, d.w])?;
        let y = conv.forward(cx, xr)?;
        let y = cx.reshape(y, &[b, n, linear.out_features])?;
        let y = cx.scale(y, BRANCH_SCALE)?;
        cx.add(lin, y)
    }

    /// `(B, N, 3C)` query/key/value projections of already normalized tokens.
    pub fn qkv(&self, cx: &mut Ctx<'_>, h: Var) -> Result<Var> {
        self.parallel(cx, h, &self.attn.qkv, &self.qkv_conv)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, attn_out: Option<&mut Vec<Var>>) -> Result<Var> {
        let h = self.norm.forward(cx, x)?;
        let qkv = self.qkv(cx, h)?;
        let (ctx, a) = self.attn.attend(cx, qkv)?;
        if let Some(sink) = attn_out {
            sink.push(a);
        }
        let y = self.parallel(cx, ctx, &self.attn.proj, &self.proj_conv)?;
        residual(cx, x, y)
    }
}

/// Mixer token MLP: LN → transpose → Linear N→D_t → gelu → Linear D_t→N → transpose → residual.
#[derive(Debug, Clone)]
pub struct TokenMlpMix {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TokenMlpMix {
    pub fn new(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig) -> Self {
        let n = cfg.num_tokens();
        Self {
            norm: LayerNorm::new(params, &alloc::format!("{prefix}.norm"), cfg.embed),
            fc1: Linear::new(params, &alloc::format!("{prefix}.fc1"), n, cfg.token_hidden),
            fc2: Linear::new(params, &alloc::format!("{prefix}.fc2"), cfg.token_hidden, n),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        dims3(cx, x)?;
        let h = self.norm.forward(cx, x)?;
        let t = cx.permute(h, &[0, 2, 1])?;
        let t = self.fc1.forward(cx, t)?;
        let t = cx.gelu(t)?;
        let t = self.fc2.forward(cx, t)?;
        let y = cx.permute(t, &[0, 2, 1])?;
        residual(cx, x, y)
    }
}

/// Mixer token mixing over the within-token structure: pointwise conv over
/// the token axis (N→D_t), `3×3` depthwise conv on each hidden token viewed
/// as `c×h×w`, gelu, pointwise conv D_t→N.
#[derive(Debug, Clone)]
pub struct SwatTokenMix {
    pub norm: LayerNorm,
    pub pw1: Conv2d,
    pub dw: Conv2d,
    pub pw2: Conv2d,
    pub desc: StructureDescriptor,
}

impl SwatTokenMix {
    pub fn new(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig, desc: StructureDescriptor) -> Self {
        let n = cfg.num_tokens();
        let dt = cfg.token_hidden;
        Self {
            norm: LayerNorm::new(params, &alloc::format!("{prefix}.norm"), cfg.embed),
            pw1: Conv2d::pointwise(params, &alloc::format!("{prefix}.pw1"), n, dt),
            dw: Conv2d::depthwise(params, &alloc::format!("{prefix}.dw"), dt, cfg.token_mix_kernel),
            pw2: Conv2d::pointwise(params, &alloc::format!("{prefix}.pw2"), dt, n),
            desc,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (b, n, c) = dims3(cx, x)?;
        let d = self.desc;
        if c != d.embed() {
            return Err(Error::Structure(alloc::format!("C = {c} does not factor as c·h·w = {}·{}·{}", d.c, d.h, d.w)));
        }
        let dt = self.pw1.out_channels;
        let h = self.norm.forward(cx, x)?;
        // channel-first view: tokens are the conv channels
        let t = cx.reshape(h, &[b, n, c, 1])?;
        let t = self.pw1.forward(cx, t)?;
        let t = cx.reshape(t, &[b, dt, d.c, d.h, d.w])?;
        let t = cx.permute(t, &[0, 2, 1, 3, 4])?;
        let t = cx.reshape(t, &[b * d.c, dt, d.h, d.w])?;
        let t = self.dw.forward(cx, t)?;
        let t = cx.reshape(t, &[b, d.c, dt, d.h, d.w])?;
        let t = cx.permute(t, &[0, 2, 1, 3, 4])?;
        let t = cx.reshape(t, &[b, dt, c, 1])?;
        let t = cx.gelu(t)?;
        let t = self.pw2.forward(cx, t)?;
        let y = cx.reshape(t, &[b, n, c])?;
        residual(cx, x, y)
    }
}

/// Channel MLP: LN → Linear C→D_c → gelu → Linear D_c→C → residual.
#[derive(Debug, Clone)]
pub struct ChannelMlpMix {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelMlpMix {
    pub fn new(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig) -> Self {
        Self {
            norm: LayerNorm::new(params, &alloc::format!("{prefix}.norm"), cfg.embed),
            fc1: Linear::new(params, &alloc::format!("{prefix}.fc1"), cfg.embed, cfg.channel_hidden),
            fc2: Linear::new(params, &alloc::format!("{prefix}.fc2"), cfg.channel_hidden, cfg.embed),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        dims3(cx, x)?;
        let h = self.norm.forward(cx, x)?;
        let h = self.fc1.forward(cx, h)?;
        let h = cx.gelu(h)?;
        let y = self.fc2.forward(cx, h)?;
        residual(cx, x, y)
    }
}

/// Channel mixing over the token grid: pointwise C→D_c, gelu, `k×k`
/// depthwise over `(Ht, Wt)`, gelu, pointwise D_c→C.
#[derive(Debug, Clone)]
pub struct SwatChannelMix {
    pub norm: LayerNorm,
    pub pw1: Conv2d,
    pub dw: Conv2d,
    pub pw2: Conv2d,
    pub grid: (usize, usize),
    /// Gelu after the depthwise conv. Only verification harnesses turn it off.
    pub post_dw_gelu: bool,
}

impl SwatChannelMix {
    pub fn new(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig) -> Self {
        Self {
            norm: LayerNorm::new(params, &alloc::format!("{prefix}.norm"), cfg.embed),
            pw1: Conv2d::pointwise(params, &alloc::format!("{prefix}.pw1"), cfg.embed, cfg.channel_hidden),
            dw: Conv2d::depthwise(params, &alloc::format!("{prefix}.dw"), cfg.channel_hidden, cfg.channel_mix_kernel),
            pw2: Conv2d::pointwise(params, &alloc::format!("{prefix}.pw2"), cfg.channel_hidden, cfg.embed),
            grid: cfg.grid(),
            post_dw_gelu: true,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (b, n, c) = dims3(cx, x)?;
        let (ht, wt) = self.grid;
        if n != ht * wt {
            return Err(shape_err!("{n} tokens do not fill a {ht}x{wt} grid"));
        }
        let h = self.norm.forward(cx, x)?;
        let t = cx.permute(h, &[0, 2, 1])?;
        let t = cx.reshape(t, &[b, c, ht, wt])?;
        let t = self.pw1.forward(cx, t)?;
        let t = cx.gelu(t)?;
        let t = self.dw.forward(cx, t)?;
        let t = if self.post_dw_gelu { cx.gelu(t)? } else { t };
        let t = self.pw2.forward(cx, t)?;
        let t = cx.reshape(t, &[b, c, n])?;
        let y = cx.permute(t, &[0, 2, 1])?;
        residual(cx, x, y)
    }
}

#[derive(Debug, Clone)]
pub enum TokenMix {
    Attention(AttentionMix),
    SwatAttention(SwatAttentionMix),
    Mlp(TokenMlpMix),
    Swat(SwatTokenMix),
}

impl TokenMix {
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, attn_out: Option<&mut Vec<Var>>) -> Result<Var> {
        match self {
            TokenMix::Attention(m) => m.forward(cx, x, attn_out),
            TokenMix::SwatAttention(m) => m.forward(cx, x, attn_out),
            TokenMix::Mlp(m) => m.forward(cx, x),
            TokenMix::Swat(m) => m.forward(cx, x),
        }
    }

    /// Parameters whose zeroing turns the sublayer into the identity.
    pub fn output_params(&self) -> Vec<ParamId> {
        match self {
            TokenMix::Attention(m) => alloc::vec![m.attn.proj.weight, m.attn.proj.bias],
            TokenMix::SwatAttention(m) => {
                let mut v = alloc::vec![m.attn.proj.weight, m.attn.proj.bias, m.proj_conv.weight];
                v.extend(m.proj_conv.bias);
                v
            }
            TokenMix::Mlp(m) => alloc::vec![m.fc2.weight, m.fc2.bias],
            TokenMix::Swat(m) => {
                let mut v = alloc::vec![m.pw2.weight];
                v.extend(m.pw2.bias);
                v
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum ChannelMix {
    Mlp(ChannelMlpMix),
    Swat(SwatChannelMix),
}

impl ChannelMix {
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        match self {
            ChannelMix::Mlp(m) => m.forward(cx, x),
            ChannelMix::Swat(m) => m.forward(cx, x),
        }
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        match self {
            ChannelMix::Mlp(m) => alloc::vec![m.fc2.weight, m.fc2.bias],
            ChannelMix::Swat(m) => {
                let mut v = alloc::vec![m.pw2.weight];
                v.extend(m.pw2.bias);
                v
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub token_mix: TokenMix,
    pub channel_mix: ChannelMix,
}

impl Block {
    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var, attn_out: Option<&mut Vec<Var>>) -> Result<Var> {
        let x = self.token_mix.forward(cx, x, attn_out)?;
        self.channel_mix.forward(cx, x)
    }
}

/// Tokenizer, optional positional embedding, mixing blocks, final norm and a
/// mean-pool linear head.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub tokenizer: Tokenizer,
    pub pos_emb: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    /// Within-token structure used by the mixing blocks.
    pub structure: StructureDescriptor,
}

/// Builds the architecture of `cfg` with parameters drawn from the default
/// initializer (truncated normal, σ = 0.02) seeded by `seed`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(cfg, &InitPolicy::new(seed))
}

impl Model {
    pub fn build(cfg: &ModelConfig, policy: &InitPolicy) -> Result<Self> {
        let mut model = Self::uninitialized(cfg)?;
        model.params.init(policy);
        Ok(model)
    }

    /// Architecture with zero weights, unit norm scales.
    pub fn uninitialized(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let structure = cfg.structure()?;
        let mut params = ParamSet::new();
        let tokenizer = if cfg.swat_tokenize {
            Tokenizer::new(&mut params, "tokenizer", structure, StemConfig::bottleneck(&structure)?)?
        } else {
            let flat = StructureDescriptor::flat(cfg.patch, cfg.embed);
            Tokenizer::new(&mut params, "tokenizer", flat, StemConfig::baseline(cfg.patch, cfg.embed))?
        };
        let pos_emb = cfg
            .pos_emb
            .then(|| params.register("pos_emb", ParamKind::Embedding, &[cfg.num_tokens(), cfg.embed]));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let tp = alloc::format!("blocks.{i}.token_mix");
            let token_mix = match (cfg.variant, cfg.swat_token_mix) {
                (Variant::Transformer, false) => TokenMix::Attention(AttentionMix::new(&mut params, &tp, cfg)?),
                (Variant::Transformer, true) => TokenMix::SwatAttention(SwatAttentionMix::new(&mut params, &tp, cfg, structure)?),
                (Variant::Mixer, false) => TokenMix::Mlp(TokenMlpMix::new(&mut params, &tp, cfg)),
                (Variant::Mixer, true) => TokenMix::Swat(SwatTokenMix::new(&mut params, &tp, cfg, structure)),
            };
            let cp = alloc::format!("blocks.{i}.channel_mix");
            let channel_mix = if cfg.swat_channel_mix {
                ChannelMix::Swat(SwatChannelMix::new(&mut params, &cp, cfg))
            } else {
                ChannelMix::Mlp(ChannelMlpMix::new(&mut params, &cp, cfg))
            };
            blocks.push(Block { token_mix, channel_mix });
        }
        let norm = LayerNorm::new(&mut params, "norm", cfg.embed);
        let head = Linear::new(&mut params, "head", cfg.embed, cfg.classes);
        Ok(Self { cfg: cfg.clone(), params, tokenizer, pos_emb, blocks, norm, head, structure })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// `(B, N, C)` tokens straight out of the tokenizer.
    pub fn tokens(&self, cx: &mut Ctx<'_>, images: Var) -> Result<Var> {
        let s = cx.shape(images).to_vec();
        if s.len() != 4 || s[2] != self.cfg.image_size || s[3] != self.cfg.image_size {
            return Err(shape_err!(
                "model expects (B,3,{0},{0}) images, got {s:?}",
                self.cfg.image_size
            ));
        }
        let grid = self.tokenizer.forward(cx, images)?;
        cx.reshape(grid, &[s[0], self.cfg.num_tokens(), self.cfg.embed])
    }

    /// Positional embedding, blocks, final norm, token mean, head.
    pub fn forward_tokens(&self, cx: &mut Ctx<'_>, tokens: Var, mut attn_out: Option<&mut Vec<Var>>) -> Result<Var> {
        let mut x = tokens;
        if let Some(pe) = self.pos_emb {
            let pe = cx.param(pe)?;
            x = cx.add(x, pe)?;
        }
        for block in &self.blocks {
            x = block.forward(cx, x, attn_out.as_deref_mut())?;
        }
        let x = self.norm.forward(cx, x)?;
        let pooled = cx.mean(x, 1)?;
        self.head.forward(cx, pooled)
    }

    pub fn logits(&self, cx: &mut Ctx<'_>, images: Var) -> Result<Var> {
        let t = self.tokens(cx, images)?;
        self.forward_tokens(cx, t, None)
    }

    /// Logits `(B, classes)` for a batch of images.
    pub fn forward_classify(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &self.params);
        let x = cx.constant(images.clone());
        let y = self.logits(&mut cx, x)?;
        Ok(cx.value(y).detached())
    }

    /// Names of all parameters, in traversal order.
    pub fn param_names(&self) -> Vec<String> {
        self.params.entries().iter().map(|e| e.name.clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [
            ModelConfig::deit_ti(),
            ModelConfig::deit_s(),
            ModelConfig::deit_b32(),
            ModelConfig::mixer_s16(),
            ModelConfig::mixer_ti(),
            ModelConfig::tiny_mixer(),
            ModelConfig::tiny_deit(),
        ] {
            cfg.validate().unwrap();
            cfg.clone().swat().validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ModelConfig::tiny_deit();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny_mixer();
        cfg.channel_mix_kernel = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::tiny_mixer();
        cfg.image_size = 30;
        assert!(matches!(cfg.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn tiny_models_produce_logits() {
        for cfg in [ModelConfig::tiny_mixer(), ModelConfig::tiny_deit()] {
            for cfg in [cfg.clone(), cfg.swat()] {
                let m = build_model(&cfg, 1).unwrap();
                let img = Tensor::full(&[2, 3, 32, 32], 0.3);
                let y = m.forward_classify(&img).unwrap();
                assert_eq!(y.shape(), &[2, 4]);
                assert!(y.is_finite());
            }
        }
    }
}
