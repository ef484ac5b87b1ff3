//! Exact parameter and FLOP accounting.
//!
//! One multiply-accumulate counts as one FLOP. Matmuls of `m×k·k×n` cost
//! `m·k·n`, convolutions cost `out_elems·k²·Cin/groups`. Norms, activations,
//! softmax, residual adds, bias adds and pooling are not counted. Costs are
//! for a single image.

use alloc::string::String;
use alloc::vec::Vec;

use crate::blocks::{Block, ChannelMix, Model, ModelConfig, TokenMix, Variant};
use crate::error::{config_err, shape_err, Result};
use crate::nn::{Conv2d, Linear, ParamId, ParamSet};

pub const MAC_CONVENTION: &str = "mac=1flop";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Row {
    pub path: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComplexityReport {
    pub rows: Vec<Row>,
    pub counting_convention: &'static str,
}

impl ComplexityReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    /// Sum over rows whose path starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.path.starts_with(prefix))
            .fold((0, 0), |(p, f), r| (p + r.params, f + r.flops))
    }
}

/// Layer path of a parameter: its name without the trailing `.weight`/`.bias`.
fn layer_path(params: &ParamSet, id: ParamId) -> String {
    let name = &params.entries()[id.index()].name;
    match name.rsplit_once('.') {
        Some((head, _)) => head.into(),
        None => name.clone(),
    }
}

struct Ledger<'a> {
    params: &'a ParamSet,
    rows: Vec<Row>,
}

impl Ledger<'_> {
    fn push(&mut self, path: String, flops: u64) {
        self.rows.push(Row { path, params: 0, flops });
    }

    fn linear(&mut self, l: &Linear, rows: usize) {
        self.push(layer_path(self.params, l.weight), (rows * l.in_features * l.out_features) as u64);
    }

    fn conv(&mut self, c: &Conv2d, out_positions: usize) {
        let macs = out_positions * c.out_channels * c.kernel * c.kernel * c.in_channels / c.groups;
        self.push(layer_path(self.params, c.weight), macs as u64);
    }

    fn norm(&mut self, id: ParamId) {
        self.push(layer_path(self.params, id), 0);
    }

    fn block(&mut self, block: &Block, n: usize, grid: (usize, usize)) {
        match &block.token_mix {
            TokenMix::Attention(m) => {
                self.norm(m.norm.gamma);
                self.attention(&m.attn.qkv, &m.attn.proj, m.attn.heads, n);
            }
            TokenMix::SwatAttention(m) => {
                let d = m.desc;
                self.norm(m.norm.gamma);
                self.linear(&m.attn.qkv, n);
                self.conv(&m.qkv_conv, n * d.h * d.w);
                let path = layer_path(self.params, m.attn.qkv.weight);
                let c = m.attn.dim();
                self.push(scores_path(&path), (2 * n * n * c) as u64);
                self.linear(&m.attn.proj, n);
                self.conv(&m.proj_conv, n * d.h * d.w);
            }
            TokenMix::Mlp(m) => {
                let c = m.norm.dim;
                self.norm(m.norm.gamma);
                self.linear(&m.fc1, c);
                self.linear(&m.fc2, c);
            }
            TokenMix::Swat(m) => {
                let c = m.norm.dim;
                let d = m.desc;
                self.norm(m.norm.gamma);
                self.conv(&m.pw1, c);
                // depthwise over (B·c, D_t, h, w)
                self.conv(&m.dw, d.c * d.h * d.w);
                self.conv(&m.pw2, c);
            }
        }
        match &block.channel_mix {
            ChannelMix::Mlp(m) => {
                self.norm(m.norm.gamma);
                self.linear(&m.fc1, n);
                self.linear(&m.fc2, n);
            }
            ChannelMix::Swat(m) => {
                let positions = grid.0 * grid.1;
                self.norm(m.norm.gamma);
                self.conv(&m.pw1, positions);
                self.conv(&m.dw, positions);
                self.conv(&m.pw2, positions);
            }
        }
    }

    fn attention(&mut self, qkv: &Linear, proj: &Linear, _heads: usize, n: usize) {
        self.linear(qkv, n);
        let path = layer_path(self.params, qkv.weight);
        // QKᵀ and A·V: heads·N·N·d each, heads·d = C
        self.push(scores_path(&path), (2 * n * n * proj.in_features) as u64);
        self.linear(proj, n);
    }

    /// Attributes each parameter tensor to its row, appending rows for any
    /// layer the walk did not visit.
    fn finish(mut self) -> ComplexityReport {
        for e in self.params.entries() {
            let path = match e.name.rsplit_once('.') {
                Some((head, _)) => head,
                None => e.name.as_str(),
            };
            let n = e.tensor.numel() as u64;
            match self.rows.iter_mut().find(|r| r.path == path) {
                Some(r) => r.params += n,
                None => self.rows.push(Row { path: path.into(), params: n, flops: 0 }),
            }
        }
        ComplexityReport { rows: self.rows, counting_convention: MAC_CONVENTION }
    }
}

fn scores_path(qkv_path: &str) -> String {
    match qkv_path.rsplit_once('.') {
        Some((head, _)) => alloc::format!("{head}.scores"),
        None => "scores".into(),
    }
}

/// Per-layer cost of one block for `n` tokens laid out on `grid`.
pub fn block_report(params: &ParamSet, block: &Block, n: usize, grid: (usize, usize)) -> ComplexityReport {
    let mut ledger = Ledger { params, rows: Vec::new() };
    ledger.block(block, n, grid);
    let mut rows = ledger.rows;
    // parameters of the block only
    for r in &mut rows {
        r.params = params
            .entries()
            .iter()
            .filter(|e| e.name.rsplit_once('.').map(|(h, _)| h) == Some(r.path.as_str()))
            .map(|e| e.tensor.numel() as u64)
            .sum();
    }
    ComplexityReport { rows, counting_convention: MAC_CONVENTION }
}

/// Parameter counts (and FLOPs at the configured image size) per layer.
pub fn count_params(model: &Model) -> ComplexityReport {
    count_flops(model, model.cfg.image_size).expect("configured image size is valid")
}

/// Per-layer FLOPs for a square `input_size` image, with parameter counts.
pub fn count_flops(model: &Model, input_size: usize) -> Result<ComplexityReport> {
    let cfg = &model.cfg;
    if input_size == 0 || input_size % cfg.patch != 0 {
        return Err(shape_err!("input size {input_size} is not divisible by patch size {}", cfg.patch));
    }
    let grid = (input_size / cfg.patch, input_size / cfg.patch);
    let n = grid.0 * grid.1;
    let fixed_n = cfg.pos_emb || cfg.variant == Variant::Mixer;
    if fixed_n && n != cfg.num_tokens() {
        return Err(shape_err!(
            "model is built for {} tokens, input size {input_size} gives {n}",
            cfg.num_tokens()
        ));
    }
    let mut ledger = Ledger { params: &model.params, rows: Vec::new() };
    let (mut h, mut w) = (input_size, input_size);
    for conv in &model.tokenizer.convs {
        (h, w) = conv.out_hw(h, w);
        ledger.conv(conv, h * w);
    }
    if let Some(pe) = model.pos_emb {
        ledger.norm(pe);
    }
    for block in &model.blocks {
        ledger.block(block, n, grid);
    }
    ledger.norm(model.norm.gamma);
    ledger.linear(&model.head, 1);
    Ok(ledger.finish())
}

/// `12NC² + 2N²C`: MACs of one transformer block.
pub fn transformer_block_flops(n: u64, c: u64) -> u64 {
    12 * n * c * c + 2 * n * n * c
}

/// `12C²`: weight count of one transformer block without biases or norms.
pub fn transformer_block_weights(c: u64) -> u64 {
    12 * c * c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Structure side `alpha`. `alpha = 1` means no within-token structure
    /// and yields the baseline model (all three components off).
    Alpha,
    /// Depthwise kernel of structure-aware channel mixing.
    Kernel,
    /// Bit mask over (tokenize, token mix, channel mix) = bits (0, 1, 2).
    Flags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: usize,
    pub config: ModelConfig,
    pub report: Result<ComplexityReport>,
}

pub fn sweep_config(template: &ModelConfig, axis: SweepAxis, value: usize) -> Result<ModelConfig> {
    let mut cfg = template.clone();
    match axis {
        SweepAxis::Alpha => {
            if value == 1 {
                cfg = cfg.baseline();
            }
            cfg.alpha = value;
        }
        SweepAxis::Kernel => cfg.channel_mix_kernel = value,
        SweepAxis::Flags => {
            if value >= 8 {
                return Err(config_err!("flag mask {value} is outside 0..8"));
            }
            cfg.swat_tokenize = value & 1 != 0;
            cfg.swat_token_mix = value & 2 != 0;
            cfg.swat_channel_mix = value & 4 != 0;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One report per value; invalid values yield an error entry and the sweep
/// continues.
pub fn sweep(template: &ModelConfig, axis: SweepAxis, values: &[usize]) -> Vec<SweepPoint> {
    values
        .iter()
        .map(|&value| {
            let config = sweep_config(template, axis, value);
            match config {
                Ok(config) => {
                    let report = Model::uninitialized(&config).map(|m| count_params(&m));
                    SweepPoint { value, config, report }
                }
                Err(e) => SweepPoint { value, config: template.clone(), report: Err(e) },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;

    #[test]
    fn single_linear_count() {
        let mut ps = ParamSet::new();
        Linear::new(&mut ps, "fc", 3, 5);
        assert_eq!(ps.numel(), 20);
    }

    #[test]
    fn single_pixel_pointwise_cost() {
        let mut ps = ParamSet::new();
        let conv = Conv2d::pointwise(&mut ps, "pw", 7, 5);
        let mut ledger = Ledger { params: &ps, rows: Vec::new() };
        ledger.conv(&conv, 1);
        assert_eq!(ledger.rows[0].flops, 35);
    }

    #[test]
    fn bad_sweep_values_do_not_stop_the_sweep() {
        let pts = sweep(&ModelConfig::tiny_mixer().swat(), SweepAxis::Kernel, &[3, 4, 5]);
        assert!(pts[0].report.is_ok());
        assert!(pts[1].report.is_err());
        assert!(pts[2].report.is_ok());
    }
}
