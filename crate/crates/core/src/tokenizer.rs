//! Patch tokenizers that keep (or discard) the spatial layout inside each token.
//!
//! A structured token of embedding dim `C = c·h·w` stores sub-patch `(i, j)` of
//! channel `c'` at channel index `k = c'·h·w + i·w + j`. Every mixing op that
//! reads within-token structure relies on this one decode rule.

use alloc::vec::Vec;

use crate::autograd::{Ctx, Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{Conv2d, ParamSet};
use crate::tensor::Tensor;

/// Within-token spatial layout: patch side `p`, structure side `alpha`,
/// and the `c×h×w` factorization of the embedding dim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StructureDescriptor {
    pub p: usize,
    pub alpha: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl StructureDescriptor {
    pub fn new(p: usize, alpha: usize, embed: usize) -> Result<Self> {
        if p == 0 || alpha == 0 || embed == 0 {
            return Err(Error::Structure(alloc::format!("p={p}, alpha={alpha}, C={embed} must all be positive")));
        }
        if p % alpha != 0 {
            return Err(Error::Structure(alloc::format!("patch size {p} is not divisible by alpha {alpha}")));
        }
        if embed % (alpha * alpha) != 0 {
            return Err(Error::Structure(alloc::format!("embedding dim {embed} is not divisible by alpha^2 = {}", alpha * alpha)));
        }
        Ok(Self { p, alpha, c: embed / (alpha * alpha), h: alpha, w: alpha })
    }

    /// No within-token structure: `alpha = 1`, `c = C`.
    pub fn flat(p: usize, embed: usize) -> Self {
        Self { p, alpha: 1, c: embed, h: 1, w: 1 }
    }

    pub fn embed(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_structured(&self) -> bool {
        self.alpha > 1
    }

    /// Stride of the sub-patch grid in pixels.
    pub fn sub_patch(&self) -> usize {
        self.p / self.alpha
    }

    pub fn decode(&self, k: usize) -> (usize, usize, usize) {
        let hw = self.h * self.w;
        (k / hw, (k % hw) / self.w, k % self.w)
    }

    pub fn encode(&self, channel: usize, i: usize, j: usize) -> usize {
        channel * self.h * self.w + i * self.w + j
    }
}

/// Channel-last token grid `(B, Ht, Wt, C)` with its structure descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub data: Tensor,
    pub structure: StructureDescriptor,
}

impl TokenGrid {
    pub fn new(data: Tensor, structure: StructureDescriptor) -> Result<Self> {
        if data.rank() != 4 || data.shape()[3] != structure.embed() {
            return Err(Error::Structure(alloc::format!(
                "grid {:?} does not carry C = c·h·w = {}",
                data.shape(),
                structure.embed()
            )));
        }
        Ok(Self { data, structure })
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    pub fn num_tokens(&self) -> usize {
        self.data.shape()[1] * self.data.shape()[2]
    }

    /// `(B, N, C)` sequence view; tokens are numbered row-major over the grid.
    pub fn to_sequence(&self) -> Tensor {
        let s = self.data.shape();
        self.data.reshape(&[s[0], s[1] * s[2], s[3]]).expect("grid is rank 4")
    }

    pub fn from_sequence(seq: &Tensor, grid: (usize, usize), structure: StructureDescriptor) -> Result<Self> {
        let s = seq.shape();
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return Err(shape_err!("sequence {s:?} does not match a {}x{} grid", grid.0, grid.1));
        }
        Self::new(seq.reshape(&[s[0], grid.0, grid.1, s[2]])?, structure)
    }
}

fn fold_shape(shape: &[usize], alpha: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(shape_err!("restructure expects (B,c,H,W), got {shape:?}"));
    }
    if alpha == 0 || shape[2] % alpha != 0 || shape[3] % alpha != 0 {
        return Err(shape_err!("spatial extents of {shape:?} are not divisible by alpha {alpha}"));
    }
    Ok((shape[0], shape[1], shape[2] / alpha, shape[3] / alpha))
}

/// Folds each `alpha×alpha` block of the intermediate map `(B, c, alpha·Ht, alpha·Wt)`
/// into one token of the `(B, Ht, Wt, c·alpha²)` grid (space-to-depth).
pub fn restructure_var(tape: &mut Tape, x: Var, alpha: usize) -> Result<Var> {
    let (b, c, ht, wt) = fold_shape(tape.shape(x), alpha)?;
    let v = tape.reshape(x, &[b, c, ht, alpha, wt, alpha])?;
    let v = tape.permute(v, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(v, &[b, ht, wt, c * alpha * alpha])
}

/// Inverse of [`restructure_var`] (depth-to-space) for a grid with `c×h×w` tokens.
pub fn unrestructure_var(tape: &mut Tape, grid: Var, desc: &StructureDescriptor) -> Result<Var> {
    let s = tape.shape(grid).to_vec();
    if s.len() != 4 || s[3] != desc.embed() {
        return Err(Error::Structure(alloc::format!("grid {s:?} does not carry C = {}", desc.embed())));
    }
    let v = tape.reshape(grid, &[s[0], s[1], s[2], desc.c, desc.h, desc.w])?;
    let v = tape.permute(v, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(v, &[s[0], desc.c, s[1] * desc.h, s[2] * desc.w])
}

pub fn restructure(intermediate: &Tensor, desc: &StructureDescriptor) -> Result<TokenGrid> {
    let (b, c, ht, wt) = fold_shape(intermediate.shape(), desc.alpha)?;
    if c != desc.c {
        return Err(Error::Structure(alloc::format!("intermediate has {c} channels, structure expects {}", desc.c)));
    }
    let a = desc.alpha;
    let data = intermediate
        .reshape(&[b, c, ht, a, wt, a])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .into_reshape(&[b, ht, wt, c * a * a])?;
    TokenGrid::new(data, *desc)
}

pub fn unrestructure(grid: &TokenGrid) -> Result<Tensor> {
    let d = grid.structure;
    let s = grid.data.shape();
    grid.data
        .reshape(&[s[0], s[1], s[2], d.c, d.h, d.w])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .into_reshape(&[s[0], d.c, s[1] * d.h, s[2] * d.w])
}

/// One convolution of a tokenizer stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StemLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub gelu: bool,
}

/// Convolution chain that maps the image to the intermediate grid.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StemConfig {
    pub layers: Vec<StemLayer>,
}

impl StemConfig {
    /// The single `p×p`, stride-`p` convolution with `C` kernels.
    pub fn baseline(p: usize, embed: usize) -> Self {
        Self::single(&StructureDescriptor::flat(p, embed))
    }

    /// One `(p/alpha)×(p/alpha)` convolution with `c` kernels at stride `p/alpha`.
    pub fn single(desc: &StructureDescriptor) -> Self {
        let k = desc.sub_patch();
        Self { layers: alloc::vec![StemLayer { out_channels: desc.c, kernel: k, stride: k, padding: 0, gelu: false }] }
    }

    /// Multi-layer bottleneck stem: `log2(p/alpha)` stages of
    /// `[3×3 conv, stride 2, padding 1, gelu]` at a hidden width of
    /// `max(8, 2·C/(p/alpha)²)`, then a `1×1` conv down to `c` channels.
    pub fn bottleneck(desc: &StructureDescriptor) -> Result<Self> {
        let s = desc.sub_patch();
        if !s.is_power_of_two() {
            return Err(config_err!("bottleneck stem needs p/alpha to be a power of two, got {s}"));
        }
        let stages = s.trailing_zeros() as usize;
        let width = Self::bottleneck_width(desc);
        let mut layers: Vec<StemLayer> = (0..stages)
            .map(|_| StemLayer { out_channels: width, kernel: 3, stride: 2, padding: 1, gelu: true })
            .collect();
        layers.push(StemLayer { out_channels: desc.c, kernel: 1, stride: 1, padding: 0, gelu: false });
        Ok(Self { layers })
    }

    pub fn bottleneck_width(desc: &StructureDescriptor) -> usize {
        let s = desc.sub_patch();
        (2 * desc.embed() / (s * s)).max(8)
    }

    pub fn cumulative_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn validate(&self, desc: &StructureDescriptor) -> Result<()> {
        if self.layers.is_empty() {
            return Err(config_err!("stem has no layers"));
        }
        if self.cumulative_stride() != desc.sub_patch() {
            return Err(config_err!(
                "stem cumulative stride {} does not equal p/alpha = {}",
                self.cumulative_stride(),
                desc.sub_patch()
            ));
        }
        let last = self.layers.last().unwrap().out_channels;
        if last != desc.c {
            return Err(config_err!("stem ends with {last} channels, structure needs c = {}", desc.c));
        }
        if self.layers.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.out_channels == 0) {
            return Err(config_err!("stem layers need positive kernel, stride and width"));
        }
        Ok(())
    }

    /// Parameter count of the chain for 3-channel input, from the closed form.
    pub fn param_count(&self) -> usize {
        let mut cin = 3;
        let mut total = 0;
        for l in &self.layers {
            total += l.out_channels * cin * l.kernel * l.kernel + l.out_channels;
            cin = l.out_channels;
        }
        total
    }
}

/// Image → structured token grid: a convolution stem followed by restructure.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub desc: StructureDescriptor,
    pub stem: StemConfig,
    pub convs: Vec<Conv2d>,
}

impl Tokenizer {
    pub fn new(params: &mut ParamSet, prefix: &str, desc: StructureDescriptor, stem: StemConfig) -> Result<Self> {
        stem.validate(&desc)?;
        let mut cin = 3;
        let convs = stem
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let conv = Conv2d::new(
                    params,
                    &alloc::format!("{prefix}.stem.{i}"),
                    cin,
                    l.out_channels,
                    l.kernel,
                    l.stride,
                    l.padding,
                    1,
                );
                cin = l.out_channels;
                conv
            })
            .collect();
        Ok(Self { desc, stem, convs })
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(shape_err!("expected (B,3,H,W) image, got {shape:?}"));
        }
        let p = self.desc.p;
        if shape[2] % p != 0 || shape[3] % p != 0 {
            return Err(shape_err!("image {}x{} is not divisible by patch size {p}", shape[2], shape[3]));
        }
        Ok((shape[2] / p, shape[3] / p))
    }

    /// Intermediate map `(B, c, alpha·Ht, alpha·Wt)` before restructuring.
    pub fn intermediate(&self, cx: &mut Ctx<'_>, image: Var) -> Result<Var> {
        self.check_image(cx.shape(image))?;
        let mut x = image;
        for (conv, layer) in self.convs.iter().zip(&self.stem.layers) {
            x = conv.forward(cx, x)?;
            if layer.gelu {
                x = cx.gelu(x)?;
            }
        }
        Ok(x)
    }

    /// `(B, Ht, Wt, C)` token grid.
    pub fn forward(&self, cx: &mut Ctx<'_>, image: Var) -> Result<Var> {
        let (ht, wt) = self.check_image(cx.shape(image))?;
        let x = self.intermediate(cx, image)?;
        let s = cx.shape(x).to_vec();
        if s[2] != ht * self.desc.alpha || s[3] != wt * self.desc.alpha {
            return Err(shape_err!(
                "stem produced {s:?}, expected spatial {}x{}",
                ht * self.desc.alpha,
                wt * self.desc.alpha
            ));
        }
        restructure_var(cx, x, self.desc.alpha)
    }
}

fn single_conv_tokenize(image: &Tensor, desc: &StructureDescriptor, weight: &Tensor, bias: Option<&Tensor>) -> Result<TokenGrid> {
    let k = desc.sub_patch();
    let expected = [desc.c, 3, k, k];
    if weight.shape() != expected {
        return Err(shape_err!("tokenizer weight {:?} should be {expected:?}", weight.shape()));
    }
    let s = image.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(shape_err!("expected (B,3,H,W) image, got {s:?}"));
    }
    if s[2] % desc.p != 0 || s[3] % desc.p != 0 {
        return Err(shape_err!("image {}x{} is not divisible by patch size {}", s[2], s[3], desc.p));
    }
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let w = tape.constant(weight.clone());
    let b = bias.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(x, w, b, k, 0, 1)?;
    restructure(tape.value(y), desc)
}

/// Baseline tokenizer: `C` kernels of `p×p` at stride `p`, channel-last grid.
pub fn baseline_tokenize(image: &Tensor, p: usize, embed: usize, weight: &Tensor, bias: Option<&Tensor>) -> Result<TokenGrid> {
    single_conv_tokenize(image, &StructureDescriptor::flat(p, embed), weight, bias)
}

/// Structure-aware tokenizer: `C/alpha²` kernels of `(p/alpha)²` at stride
/// `p/alpha`, then `alpha×alpha` neighbours folded into one token.
pub fn swat_tokenize(image: &Tensor, desc: &StructureDescriptor, weight: &Tensor, bias: Option<&Tensor>) -> Result<TokenGrid> {
    single_conv_tokenize(image, desc, weight, bias)
}

/// Structure-preserving patch merge: unfold to `(B, c, Ht·h, Wt·w)`, apply a
/// `3×3` stride-2 convolution to `2c` channels, fold back. Quarters the token
/// count and doubles the embedding dim.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub desc: StructureDescriptor,
    pub conv: Conv2d,
}

impl PatchMerge {
    pub fn new(params: &mut ParamSet, prefix: &str, desc: StructureDescriptor) -> Self {
        Self { desc, conv: Conv2d::new(params, &alloc::format!("{prefix}.reduction"), desc.c, 2 * desc.c, 3, 2, 1, 1) }
    }

    pub fn output_structure(&self) -> StructureDescriptor {
        merged_structure(&self.desc)
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, grid: Var) -> Result<Var> {
        check_mergeable(cx.shape(grid))?;
        let x = unrestructure_var(cx, grid, &self.desc)?;
        let y = self.conv.forward(cx, x)?;
        restructure_var(cx, y, self.desc.h)
    }
}

fn merged_structure(d: &StructureDescriptor) -> StructureDescriptor {
    StructureDescriptor { p: 2 * d.p, alpha: d.alpha, c: 2 * d.c, h: d.h, w: d.w }
}

fn check_mergeable(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
        return Err(shape_err!("patch merge needs an even token grid, got {shape:?}"));
    }
    Ok(())
}

pub fn patch_merge_structured(grid: &TokenGrid, weight: &Tensor, bias: Option<&Tensor>) -> Result<TokenGrid> {
    check_mergeable(grid.data.shape())?;
    let d = grid.structure;
    let expected = [2 * d.c, d.c, 3, 3];
    if weight.shape() != expected {
        return Err(shape_err!("merge weight {:?} should be {expected:?}", weight.shape()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(unrestructure(grid)?);
    let w = tape.constant(weight.clone());
    let b = bias.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(x, w, b, 2, 1, 1)?;
    let out = merged_structure(&d);
    let folded = restructure(tape.value(y), &out)?;
    Ok(folded)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_validation() {
        let d = StructureDescriptor::new(16, 8, 192).unwrap();
        assert_eq!((d.c, d.h, d.w, d.sub_patch()), (3, 8, 8, 2));
        assert!(StructureDescriptor::new(16, 3, 192).is_err());
        assert!(StructureDescriptor::new(16, 8, 100).is_err());
        let flat = StructureDescriptor::new(16, 1, 192).unwrap();
        assert_eq!(flat, StructureDescriptor::flat(16, 192));
        assert!(!flat.is_structured());
    }

    #[test]
    fn decode_encode_roundtrip() {
        let d = StructureDescriptor::new(8, 2, 12).unwrap();
        for k in 0..12 {
            let (c, i, j) = d.decode(k);
            assert_eq!(d.encode(c, i, j), k);
        }
    }

    #[test]
    fn two_by_two_folds_row_major() {
        let x = Tensor::new(&[1, 1, 2, 2], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = StructureDescriptor::new(2, 2, 4).unwrap();
        let g = restructure(&x, &d).unwrap();
        assert_eq!(g.data.shape(), &[1, 1, 1, 4]);
        assert_eq!(g.data.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn alpha_one_is_channel_last_transpose() {
        let x = Tensor::from_fn(&[1, 2, 2, 3], |i| (i[1] * 100 + i[2] * 10 + i[3]) as f64);
        let g = restructure(&x, &StructureDescriptor::flat(1, 2)).unwrap();
        assert_eq!(g.data, x.permute(&[0, 2, 3, 1]).unwrap().detached());
    }

    #[test]
    fn default_stem_shapes() {
        let d = StructureDescriptor::new(16, 8, 192).unwrap();
        let stem = StemConfig::bottleneck(&d).unwrap();
        assert_eq!(stem.layers.len(), 2);
        assert_eq!(stem.layers[0].out_channels, 96);
        assert_eq!(stem.cumulative_stride(), 2);
        stem.validate(&d).unwrap();
        let bad = StemConfig { layers: alloc::vec![StemLayer { out_channels: 3, kernel: 3, stride: 4, padding: 1, gelu: false }] };
        assert!(matches!(bad.validate(&d), Err(Error::Config(_))));
    }

    #[test]
    fn odd_grid_cannot_merge() {
        let d = StructureDescriptor::new(4, 2, 4).unwrap();
        let g = TokenGrid::new(Tensor::zeros(&[1, 3, 2, 4]), d).unwrap();
        assert!(patch_merge_structured(&g, &Tensor::zeros(&[2, 1, 3, 3]), None).is_err());
    }
}
