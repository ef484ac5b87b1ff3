//! Verification checks: finite-difference gradient checks, equivalence
//! against independent loop oracles and collapse-to-baseline identities,
//! structure round-trips, permutation probes and attention maps.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Ctx, GradFault, Tape, Var};
use crate::blocks::{
    AttentionMix, ChannelMlpMix, Model, ModelConfig, SwatAttentionMix, SwatChannelMix, SwatTokenMix, TokenMlpMix, Variant,
};
use crate::error::{contract_err, Error, Result};
use crate::nn::{InitPolicy, Linear, Mhsa, ParamId, ParamSet};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{self, PatchMerge, StemConfig, StructureDescriptor, TokenGrid, Tokenizer};

pub mod oracles;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

impl Status {
    pub fn as_str(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
        }
    }
}

/// Which side of the tolerance counts as passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    /// Pass iff `worst_case <= tolerance` (errors, deviations that must vanish).
    AtMost,
    /// Pass iff `worst_case > tolerance` (effects that must be present).
    Above,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub status: Status,
    pub worst_case: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub seeds_used: Vec<u64>,
    /// Where the worst case occurred, or why the check failed outright.
    pub detail: String,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, worst_case: f64, tolerance: f64, bound: Bound, seeds_used: Vec<u64>, detail: impl Into<String>) -> Self {
        let pass = worst_case.is_finite()
            && match bound {
                Bound::AtMost => worst_case <= tolerance,
                Bound::Above => worst_case > tolerance,
            };
        Self {
            name: name.into(),
            status: if pass { Status::Pass } else { Status::Fail },
            worst_case,
            tolerance,
            bound,
            seeds_used,
            detail: detail.into(),
        }
    }

    pub fn failed(name: impl Into<String>, tolerance: f64, bound: Bound, seeds_used: Vec<u64>, err: &Error) -> Self {
        let mut r = Self::new(name, f64::NAN, tolerance, bound, seeds_used, err.to_string());
        r.status = Status::Fail;
        r
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng::uniform(rng, -scale, scale))
}

/// Fills every parameter of `params` with uniform noise in `[-scale, scale]`
/// (norm scales around 1).
pub fn randomize_params(params: &mut ParamSet, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let is_scale = params.entries()[id.index()].kind == crate::nn::ParamKind::NormScale;
        for v in params.tensor_mut(id).data_mut() {
            *v = if is_scale { 1.0 + rng::uniform(rng, -0.5, 0.5) * scale } else { rng::uniform(rng, -scale, scale) };
        }
    }
}

// ---------------------------------------------------------------------------
// gradient checks

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Bound on `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub tol: f64,
    pub fault: Option<GradFault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-4, tol: 1e-5, fault: None }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks analytic gradients of `f` against central differences with respect
/// to every element of `inputs` and of `params`.
///
/// The output of `f` is reduced to a scalar through a fixed random projection
/// so every output element contributes.
pub fn grad_check_with<F>(name: &str, params: &ParamSet, inputs: &[Tensor], seed: u64, cfg: &GradCheckConfig, f: F) -> CheckReport
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    match grad_check_inner(params, inputs, seed, cfg, &f) {
        Ok((worst, detail)) => CheckReport::new(name, worst, cfg.tol, Bound::AtMost, vec![seed], detail),
        Err(e) => CheckReport::failed(name, cfg.tol, Bound::AtMost, vec![seed], &e),
    }
}

pub fn grad_check<F>(name: &str, inputs: &[Tensor], seed: u64, cfg: &GradCheckConfig, f: F) -> CheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let params = ParamSet::new();
    grad_check_with(name, &params, inputs, seed, cfg, |cx, xs| f(cx.tape, xs))
}

fn projected_loss<F>(params: &ParamSet, inputs: &[Tensor], proj: &mut Option<Tensor>, seed: u64, rg: bool, tape: &mut Tape, f: &F) -> Result<(Var, Vec<Var>)>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let mut cx = Ctx::new(tape, params);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if rg { cx.leaf(t.detached().with_requires_grad()) } else { cx.constant(t.clone()) })
        .collect();
    let out = f(&mut cx, &vars)?;
    let shape = cx.shape(out).to_vec();
    let r = proj.get_or_insert_with(|| {
        let mut rng = rng::derived(seed, 0x9e37);
        random_tensor(&mut rng, &shape, 1.0)
    });
    if r.shape() != shape.as_slice() {
        return Err(contract_err!("output shape changed between evaluations"));
    }
    let r = cx.constant(r.clone());
    let weighted = cx.mul(out, r)?;
    Ok((cx.sum(weighted)?, vars))
}

fn grad_check_inner<F>(params: &ParamSet, inputs: &[Tensor], seed: u64, cfg: &GradCheckConfig, f: &F) -> Result<(f64, String)>
where
    F: Fn(&mut Ctx<'_>, &[Var]) -> Result<Var>,
{
    let mut proj = None;
    let mut tape = Tape::new();
    tape.inject_fault(cfg.fault);
    let (loss, vars) = projected_loss(params, inputs, &mut proj, seed, true, &mut tape, f)?;
    tape.backward(loss)?;

    let eval = |ps: &ParamSet, xs: &[Tensor], proj: &mut Option<Tensor>| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = projected_loss(ps, xs, proj, seed, false, &mut t, f)?;
        Ok(t.value(l).data()[0])
    };

    let mut worst = 0.0f64;
    let mut where_ = String::from("no differentiable inputs");
    let mut record = |a: f64, n: f64, label: &dyn Fn() -> String| -> Result<()> {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::Numeric(alloc::format!("non-finite gradient at {}: analytic {a}, numeric {n}", label())));
        }
        let e = relative_error(a, n);
        if e > worst || where_ == "no differentiable inputs" {
            worst = worst.max(e);
            where_ = label();
        }
        Ok(())
    };

    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = tape.grad(*v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + cfg.eps;
            let up = eval(params, &xs, &mut proj)?;
            xs[i].data_mut()[j] = orig - cfg.eps;
            let down = eval(params, &xs, &mut proj)?;
            xs[i].data_mut()[j] = orig;
            record(g.data()[j], (up - down) / (2.0 * cfg.eps), &|| alloc::format!("input {i}[{j}]"))?;
        }
    }

    let bound: Vec<(ParamId, Var)> = tape.param_bindings().collect();
    let mut ps = params.clone();
    for (id, v) in bound {
        let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(params.tensor(id).shape()));
        for j in 0..params.tensor(id).numel() {
            let orig = ps.tensor(id).data()[j];
            ps.tensor_mut(id).data_mut()[j] = orig + cfg.eps;
            let up = eval(&ps, inputs, &mut proj)?;
            ps.tensor_mut(id).data_mut()[j] = orig - cfg.eps;
            let down = eval(&ps, inputs, &mut proj)?;
            ps.tensor_mut(id).data_mut()[j] = orig;
            let name = &params.entries()[id.index()].name;
            record(g.data()[j], (up - down) / (2.0 * cfg.eps), &|| alloc::format!("{name}[{j}]"))?;
        }
    }
    Ok((worst, where_))
}

/// Small configurations used by the checks: two blocks, `C = 16`, 16 tokens.
pub fn probe_configs() -> [ModelConfig; 2] {
    [ModelConfig::tiny_deit(), ModelConfig::tiny_mixer()]
}

/// Gradient checks for every differentiable operation, layer, sublayer and
/// both tiny structure-aware models.
pub fn gradient_suite(seed: u64, cfg: &GradCheckConfig) -> Vec<CheckReport> {
    let mut out = op_gradient_suite(seed, cfg);
    out.extend(layer_gradient_suite(seed, cfg));
    out
}

/// One gradient check per differentiable tape operation.
pub fn op_gradient_suite(seed: u64, cfg: &GradCheckConfig) -> Vec<CheckReport> {
    let mut out = Vec::new();
    let mut rng = rng::derived(seed, 1);
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape, 1.0);

    let a23 = t(&[2, 3]);
    let b23 = t(&[2, 3]);
    let b3 = t(&[3]);
    out.push(grad_check("op.add", &[a23.clone(), b23.clone()], seed, cfg, |tp, v| tp.add(v[0], v[1])));
    out.push(grad_check("op.add_broadcast", &[a23.clone(), b3], seed, cfg, |tp, v| tp.add(v[0], v[1])));
    out.push(grad_check("op.mul", &[a23.clone(), b23], seed, cfg, |tp, v| tp.mul(v[0], v[1])));
    out.push(grad_check("op.scale", &[a23.clone()], seed, cfg, |tp, v| tp.scale(v[0], -1.7)));
    out.push(grad_check("op.reshape", &[a23.clone()], seed, cfg, |tp, v| tp.reshape(v[0], &[3, 2])));
    out.push(grad_check("op.permute", &[t(&[2, 3, 4])], seed, cfg, |tp, v| tp.permute(v[0], &[2, 0, 1])));
    out.push(grad_check("op.narrow", &[t(&[2, 5, 3])], seed, cfg, |tp, v| tp.narrow(v[0], 1, 1, 3)));
    out.push(grad_check("op.matmul", &[t(&[3, 4]), t(&[4, 5])], seed, cfg, |tp, v| tp.matmul(v[0], v[1])));
    out.push(grad_check("op.matmul_batched", &[t(&[2, 3, 4]), t(&[2, 4, 2])], seed, cfg, |tp, v| tp.matmul(v[0], v[1])));
    out.push(grad_check("op.matmul_shared", &[t(&[2, 3, 4]), t(&[4, 2])], seed, cfg, |tp, v| tp.matmul(v[0], v[1])));
    out.push(grad_check("op.conv2d", &[t(&[2, 4, 5, 5]), t(&[6, 2, 3, 3]), t(&[6])], seed, cfg, |tp, v| {
        tp.conv2d(v[0], v[1], Some(v[2]), 2, 1, 2)
    }));
    out.push(grad_check("op.conv2d_depthwise", &[t(&[1, 3, 4, 4]), t(&[3, 1, 3, 3])], seed, cfg, |tp, v| {
        tp.conv2d(v[0], v[1], None, 1, 1, 3)
    }));
    out.push(grad_check("op.gelu", &[t(&[2, 5]).map(|x| 3.0 * x)], seed, cfg, |tp, v| tp.gelu(v[0])));
    out.push(grad_check("op.softmax", &[t(&[2, 4, 3])], seed, cfg, |tp, v| tp.softmax(v[0], 1)));
    out.push(grad_check("op.layer_norm", &[t(&[2, 5, 3]), t(&[5]), t(&[5])], seed, cfg, |tp, v| {
        tp.layer_norm(v[0], v[1], v[2], 1, 1e-5)
    }));
    out.push(grad_check("op.mean", &[t(&[2, 3, 4])], seed, cfg, |tp, v| tp.mean(v[0], 1)));
    out.push(grad_check("op.sum", &[t(&[2, 3])], seed, cfg, |tp, v| tp.sum(v[0])));
    out.push(grad_check("op.cross_entropy", &[t(&[3, 4])], seed, cfg, |tp, v| tp.cross_entropy(v[0], &[0, 3, 1])));
    out
}

/// Gradient checks for layers, sublayers, tokenizers and both tiny
/// structure-aware models.
pub fn layer_gradient_suite(seed: u64, cfg: &GradCheckConfig) -> Vec<CheckReport> {
    let mut out = Vec::new();
    let mut layer = |name: &str, build: &dyn Fn(&mut ParamSet) -> LayerFn, input: Tensor| {
        let mut ps = ParamSet::new();
        let f = build(&mut ps);
        let mut prng = rng::derived(seed, 2);
        randomize_params(&mut ps, &mut prng, 0.5);
        out.push(grad_check_with(name, &ps, &[input], seed, cfg, |cx, v| f(cx, v[0])));
    };

    let mut irng = rng::derived(seed, 3);
    let mut x = |shape: &[usize]| random_tensor(&mut irng, shape, 1.0);
    let blk = small_block_config();
    let desc = blk.structure().unwrap();

    layer("layer.linear", &|ps| {
        let l = Linear::new(ps, "fc", 3, 2);
        alloc::boxed::Box::new(move |cx, x| l.forward(cx, x))
    }, x(&[2, 3]));
    layer("layer.mhsa", &|ps| {
        let m = Mhsa::new(ps, "attn", 4, 2).unwrap();
        alloc::boxed::Box::new(move |cx, x| m.forward(cx, x))
    }, x(&[1, 3, 4]));
    let b = blk.clone();
    layer("sublayer.attention", &move |ps| {
        let m = AttentionMix::new(ps, "tm", &b).unwrap();
        alloc::boxed::Box::new(move |cx, x| m.forward(cx, x, None))
    }, x(&[1, 4, 8]));
    let b = blk.clone();
    layer("sublayer.swat_attention", &move |ps| {
        let m = SwatAttentionMix::new(ps, "tm", &b, desc).unwrap();
        alloc::boxed::Box::new(move |cx, x| m.forward(cx, x, None))
    }, x(&[1, 4, 8]));
    let b = blk.clone();
    layer("sublayer.token_mlp", &move |ps| {
        let m = TokenMlpMix::new(ps, "tm", &b);
        alloc::boxed::Box::new(move |cx, x| m.forward(cx, x))
    }, x(&[2, 4, 8]));
    let b = blk.clone();
    layer("sublayer.swat_token_mix", &move |ps| {
        let m = SwatTokenMix::new(ps, "tm", &b, desc);
        alloc::boxed::Box::new(move |cx, x| m.forward(cx, x))
    }, x(&[2, 4, 8]));
    let b = blk.clone();
    layer("sublayer.channel_mlp", &move |ps| {
        let m = ChannelMlpMix::new(ps, "cm", &b);
        alloc::boxed::Box::new(move |cx, x| m.forward(cx, x))
    }, x(&[2, 4, 8]));
    let b = blk.clone();
    layer("sublayer.swat_channel_mix", &move |ps| {
        let m = SwatChannelMix::new(ps, "cm", &b);
        alloc::boxed::Box::new(move |cx, x| m.forward(cx, x))
    }, x(&[1, 4, 8]));
    layer("tokenizer.bottleneck", &|ps| {
        let d = StructureDescriptor::new(4, 2, 8).unwrap();
        let tk = Tokenizer::new(ps, "tok", d, StemConfig::bottleneck(&d).unwrap()).unwrap();
        alloc::boxed::Box::new(move |cx, x| tk.forward(cx, x))
    }, x(&[1, 3, 8, 8]));
    layer("tokenizer.patch_merge", &|ps| {
        let d = StructureDescriptor::new(4, 2, 8).unwrap();
        let pm = PatchMerge::new(ps, "merge", d);
        alloc::boxed::Box::new(move |cx, x| pm.forward(cx, x))
    }, x(&[1, 2, 2, 8]));

    for base in probe_configs() {
        let cfg_m = base.swat();
        let name = match cfg_m.variant {
            Variant::Transformer => "model.tiny_swat_transformer",
            Variant::Mixer => "model.tiny_swat_mixer",
        };
        let mut model = match Model::build(&cfg_m, &InitPolicy::fan_in(seed)) {
            Ok(m) => m,
            Err(e) => {
                out.push(CheckReport::failed(name, cfg.tol, Bound::AtMost, vec![seed], &e));
                continue;
            }
        };
        let mut prng = rng::derived(seed, 4);
        randomize_params(&mut model.params, &mut prng, 0.3);
        let images = random_tensor(&mut prng, &[1, 3, cfg_m.image_size, cfg_m.image_size], 1.0);
        out.push(grad_check_with(name, &model.params, &[], seed, cfg, |cx, _| {
            let img = cx.constant(images.clone());
            model.logits(cx, img)
        }));
    }
    out
}

type LayerFn = alloc::boxed::Box<dyn Fn(&mut Ctx<'_>, Var) -> Result<Var>>;

/// Block-level configuration used by sublayer checks: 4 tokens on a 2×2
/// grid, `C = 8 = 2·2·2`.
pub fn small_block_config() -> ModelConfig {
    ModelConfig {
        variant: Variant::Transformer,
        depth: 1,
        embed: 8,
        heads: 2,
        token_hidden: 6,
        channel_hidden: 12,
        patch: 4,
        alpha: 2,
        token_mix_kernel: 3,
        channel_mix_kernel: 3,
        pos_emb: false,
        classes: 3,
        image_size: 8,
        swat_tokenize: false,
        swat_token_mix: false,
        swat_channel_mix: false,
    }
}

// ---------------------------------------------------------------------------
// equivalence checks

pub const EQUIV_TOL: f64 = 1e-12;
pub const MIN_TRIALS: usize = 20;

fn run_trials(name: &str, seed: u64, trials: usize, tol: f64, mut trial: impl FnMut(u64) -> Result<f64>) -> CheckReport {
    let seeds: Vec<u64> = (0..trials as u64).map(|i| seed.wrapping_add(i)).collect();
    let mut worst = 0.0f64;
    let mut worst_seed = seeds[0];
    for &s in &seeds {
        match trial(s) {
            Ok(d) => {
                if d > worst || d.is_nan() {
                    worst = d;
                    worst_seed = s;
                }
            }
            Err(e) => return CheckReport::failed(name, tol, Bound::AtMost, seeds, &e),
        }
    }
    CheckReport::new(name, worst, tol, Bound::AtMost, seeds, alloc::format!("worst at seed {worst_seed}"))
}

fn eval1(params: &ParamSet, x: &Tensor, f: impl FnOnce(&mut Ctx<'_>, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, params);
    let v = cx.constant(x.clone());
    let y = f(&mut cx, v)?;
    Ok(cx.value(y).detached())
}

/// Linear layer vs 1×1 convolution with the same weights on the channel-first view.
pub fn linear_vs_pointwise(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let (b, n, cin, cout) = (2, 5, 6, 4);
    let mut ps = ParamSet::new();
    let lin = Linear::new(&mut ps, "fc", cin, cout);
    randomize_params(&mut ps, &mut rng, 1.0);
    let x = random_tensor(&mut rng, &[b, n, cin], 1.0);
    let y_lin = eval1(&ps, &x, |cx, v| lin.forward(cx, v))?;
    let w = ps.tensor(lin.weight).reshape(&[cout, cin, 1, 1])?;
    let bias = ps.tensor(lin.bias).clone();
    let y_conv = eval1(&ps, &x, |cx, v| {
        let t = cx.permute(v, &[0, 2, 1])?;
        let t = cx.reshape(t, &[b, cin, n, 1])?;
        let w = cx.constant(w);
        let bias = cx.constant(bias);
        let y = cx.conv2d(t, w, Some(bias), 1, 0, 1)?;
        let y = cx.reshape(y, &[b, cout, n])?;
        cx.permute(y, &[0, 2, 1])
    })?;
    y_lin.max_abs_diff(&y_conv)
}

/// Grouped strided padded conv vs the naive loop oracle.
pub fn conv_vs_loop(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let x = random_tensor(&mut rng, &[2, 4, 6, 6], 1.0);
    let w = random_tensor(&mut rng, &[6, 2, 3, 3], 1.0);
    let bias = random_tensor(&mut rng, &[6], 1.0);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
    let y = tape.conv2d(xv, wv, Some(bv), 2, 1, 2)?;
    let oracle = oracles::conv2d(&x, &w, Some(&bias), 2, 1, 2);
    tape.value(y).max_abs_diff(&oracle)
}

/// MHSA vs a per-head loop oracle.
pub fn mhsa_vs_loop(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let mut ps = ParamSet::new();
    let m = Mhsa::new(&mut ps, "attn", 4, 2)?;
    randomize_params(&mut ps, &mut rng, 1.0);
    let x = random_tensor(&mut rng, &[1, 3, 4], 1.0);
    let y = eval1(&ps, &x, |cx, v| m.forward(cx, v))?;
    let oracle = oracles::mhsa(
        &x,
        ps.tensor(m.qkv.weight),
        ps.tensor(m.qkv.bias),
        ps.tensor(m.proj.weight),
        ps.tensor(m.proj.bias),
        m.heads,
    );
    y.max_abs_diff(&oracle)
}

/// Structure-aware tokenizer at `alpha = 1` vs the baseline tokenizer.
pub fn alpha_one_collapse(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let (p, c) = (4, 6);
    let img = random_tensor(&mut rng, &[2, 3, 8, 12], 1.0);
    let w = random_tensor(&mut rng, &[c, 3, p, p], 1.0);
    let b = random_tensor(&mut rng, &[c], 1.0);
    let base = tokenizer::baseline_tokenize(&img, p, c, &w, Some(&b))?;
    let desc = StructureDescriptor::new(p, 1, c)?;
    let swat = tokenizer::swat_tokenize(&img, &desc, &w, Some(&b))?;
    Ok(if base.data.data() == swat.data.data() && base.data.shape() == swat.data.shape() { 0.0 } else { f64::INFINITY })
}

fn delta_kernel(channels: usize, k: usize) -> Tensor {
    Tensor::from_fn(&[channels, 1, k, k], |i| if i[2] == k / 2 && i[3] == k / 2 { 1.0 } else { 0.0 })
}

/// Mixer token mixing with a centred-delta depthwise kernel vs the token MLP
/// with the same pointwise weights.
pub fn mixer_token_delta_collapse(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let cfg = small_block_config();
    let desc = cfg.structure()?;
    let mut ps = ParamSet::new();
    let swat = SwatTokenMix::new(&mut ps, "swat", &cfg, desc);
    let base = TokenMlpMix::new(&mut ps, "base", &cfg);
    randomize_params(&mut ps, &mut rng, 1.0);
    transplant_norm(&mut ps, &swat.norm, &base.norm)?;
    transplant_pointwise(&mut ps, &swat.pw1, &base.fc1)?;
    transplant_pointwise(&mut ps, &swat.pw2, &base.fc2)?;
    ps.assign(swat.dw.weight, &delta_kernel(cfg.token_hidden, 3))?;
    ps.assign(swat.dw.bias.unwrap(), &Tensor::zeros(&[cfg.token_hidden]))?;
    let x = random_tensor(&mut rng, &[2, 4, 8], 1.0);
    let a = eval1(&ps, &x, |cx, v| swat.forward(cx, v))?;
    let b = eval1(&ps, &x, |cx, v| base.forward(cx, v))?;
    a.max_abs_diff(&b)
}

/// Channel mixing with a centred-delta depthwise kernel (post-depthwise gelu
/// disabled) vs the channel MLP with the same pointwise weights.
pub fn channel_delta_collapse(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let cfg = small_block_config();
    let mut ps = ParamSet::new();
    let mut swat = SwatChannelMix::new(&mut ps, "swat", &cfg);
    swat.post_dw_gelu = false;
    let base = ChannelMlpMix::new(&mut ps, "base", &cfg);
    randomize_params(&mut ps, &mut rng, 1.0);
    transplant_norm(&mut ps, &swat.norm, &base.norm)?;
    transplant_pointwise(&mut ps, &swat.pw1, &base.fc1)?;
    transplant_pointwise(&mut ps, &swat.pw2, &base.fc2)?;
    ps.assign(swat.dw.weight, &delta_kernel(cfg.channel_hidden, cfg.channel_mix_kernel))?;
    ps.assign(swat.dw.bias.unwrap(), &Tensor::zeros(&[cfg.channel_hidden]))?;
    let x = random_tensor(&mut rng, &[2, 4, 8], 1.0);
    let a = eval1(&ps, &x, |cx, v| swat.forward(cx, v))?;
    let b = eval1(&ps, &x, |cx, v| base.forward(cx, v))?;
    a.max_abs_diff(&b)
}

/// Structure-aware attention with dead conv branches vs baseline attention
/// whose projections are scaled by 0.5.
pub fn attention_dead_branch_collapse(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let cfg = small_block_config();
    let desc = cfg.structure()?;
    let mut ps = ParamSet::new();
    let swat = SwatAttentionMix::new(&mut ps, "swat", &cfg, desc)?;
    let base = AttentionMix::new(&mut ps, "base", &cfg)?;
    randomize_params(&mut ps, &mut rng, 1.0);
    for conv in [&swat.qkv_conv, &swat.proj_conv] {
        let shape = ps.tensor(conv.weight).shape().to_vec();
        ps.assign(conv.weight, &Tensor::zeros(&shape))?;
        ps.assign(conv.bias.unwrap(), &Tensor::zeros(&[conv.out_channels]))?;
    }
    transplant_norm(&mut ps, &swat.norm, &base.norm)?;
    for (from, to) in [(&swat.attn.qkv, &base.attn.qkv), (&swat.attn.proj, &base.attn.proj)] {
        let w = ps.tensor(from.weight).map(|v| 0.5 * v);
        let b = ps.tensor(from.bias).map(|v| 0.5 * v);
        ps.assign(to.weight, &w)?;
        ps.assign(to.bias, &b)?;
    }
    let x = random_tensor(&mut rng, &[2, 4, 8], 1.0);
    let a = eval1(&ps, &x, |cx, v| swat.forward(cx, v, None))?;
    let b = eval1(&ps, &x, |cx, v| base.forward(cx, v, None))?;
    a.max_abs_diff(&b)
}

fn transplant_norm(ps: &mut ParamSet, from: &crate::nn::LayerNorm, to: &crate::nn::LayerNorm) -> Result<()> {
    let g = ps.tensor(from.gamma).clone();
    let b = ps.tensor(from.beta).clone();
    ps.assign(to.gamma, &g)?;
    ps.assign(to.beta, &b)
}

/// Copies a pointwise conv's `(out, in, 1, 1)` weights into a linear layer.
fn transplant_pointwise(ps: &mut ParamSet, conv: &crate::nn::Conv2d, lin: &Linear) -> Result<()> {
    let w = ps.tensor(conv.weight).reshape(&[conv.out_channels, conv.in_channels])?;
    ps.assign(lin.weight, &w)?;
    if let Some(b) = conv.bias {
        let b = ps.tensor(b).clone();
        ps.assign(lin.bias, &b)?;
    }
    Ok(())
}

pub fn equivalence_suite(seed: u64, trials: usize) -> Vec<CheckReport> {
    let trials = trials.max(MIN_TRIALS);
    vec![
        run_trials("equiv.linear_pointwise", seed, trials, EQUIV_TOL, linear_vs_pointwise),
        run_trials("equiv.conv_loop_oracle", seed, trials, EQUIV_TOL, conv_vs_loop),
        run_trials("equiv.mhsa_loop_oracle", seed, trials, EQUIV_TOL, mhsa_vs_loop),
        run_trials("equiv.alpha1_tokenizer", seed, trials, 0.0, alpha_one_collapse),
        run_trials("equiv.mixer_token_delta", seed, trials, EQUIV_TOL, mixer_token_delta_collapse),
        run_trials("equiv.channel_mix_delta", seed, trials, EQUIV_TOL, channel_delta_collapse),
        run_trials("equiv.attention_dead_branch", seed, trials, EQUIV_TOL, attention_dead_branch_collapse),
    ]
}

// ---------------------------------------------------------------------------
// structure checks

/// Round trip restructure → unrestructure on random shapes; bitwise.
pub fn restructure_roundtrip(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let alpha = [1, 2, 4][rng.random_range(0..3)];
    let b = rng.random_range(1..3);
    let c = rng.random_range(1..4);
    let (ht, wt) = (rng.random_range(1..4), rng.random_range(1..4));
    let x = random_tensor(&mut rng, &[b, c, ht * alpha, wt * alpha], 1.0);
    let desc = StructureDescriptor::new(alpha, alpha, c * alpha * alpha)?;
    let grid = tokenizer::restructure(&x, &desc)?;
    let back = tokenizer::unrestructure(&grid)?;
    Ok(if back == x { 0.0 } else { f64::INFINITY })
}

/// Every intermediate position lands in the token and channel segment given
/// by the decode rule.
pub fn restructure_index_oracle(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let alpha = [2, 3, 4][rng.random_range(0..3)];
    let (b, c, ht, wt) = (2, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
    let x = random_tensor(&mut rng, &[b, c, ht * alpha, wt * alpha], 1.0);
    let desc = StructureDescriptor::new(alpha, alpha, c * alpha * alpha)?;
    let grid = tokenizer::restructure(&x, &desc)?;
    let mut bad = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            for r in 0..ht * alpha {
                for q in 0..wt * alpha {
                    let k = ci * alpha * alpha + (r % alpha) * alpha + q % alpha;
                    if grid.data.get(&[bi, r / alpha, q / alpha, k]) != x.get(&[bi, ci, r, q]) {
                        bad += 1;
                    }
                }
            }
        }
    }
    Ok(bad as f64)
}

/// Perturbs one pixel and checks that the single-conv tokenizer changes
/// exactly the channel segment of one sub-patch of one token. Returns the
/// number of grid entries that changed outside that segment, plus one if the
/// segment itself did not change.
pub fn locality_violations(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let desc = StructureDescriptor::new(4, 2, 8)?;
    let (hh, ww) = (8, 12);
    let img = random_tensor(&mut rng, &[1, 3, hh, ww], 1.0);
    let w = random_tensor(&mut rng, &[desc.c, 3, 2, 2], 1.0);
    let (py, px, ch) = (rng.random_range(0..hh), rng.random_range(0..ww), rng.random_range(0..3));
    let mut img2 = img.clone();
    img2.set(&[0, ch, py, px], img.get(&[0, ch, py, px]) + 1.0);
    let g1 = tokenizer::swat_tokenize(&img, &desc, &w, None)?;
    let g2 = tokenizer::swat_tokenize(&img2, &desc, &w, None)?;
    let (ty, tx) = (py / desc.p, px / desc.p);
    let sub = desc.sub_patch();
    let (i, j) = ((py % desc.p) / sub, (px % desc.p) / sub);
    let (gh, gw) = g1.grid();
    let mut violations = 0usize;
    let mut segment_changed = false;
    for y in 0..gh {
        for x in 0..gw {
            for k in 0..desc.embed() {
                let changed = g1.data.get(&[0, y, x, k]) != g2.data.get(&[0, y, x, k]);
                let (_, ki, kj) = desc.decode(k);
                let inside = y == ty && x == tx && ki == i && kj == j;
                if changed && !inside {
                    violations += 1;
                }
                segment_changed |= changed && inside;
            }
        }
    }
    Ok(violations as f64 + if segment_changed { 0.0 } else { 1.0 })
}

/// Patch merge with centred-delta kernels: every output entry must equal the
/// stride-2 sample of the unfolded input predicted by the decode rule, over
/// all even grids up to 4×4 with `c = 1, h = w = 2`.
pub fn patch_merge_oracle(s: u64) -> Result<f64> {
    let mut rng = rng::seeded(s);
    let desc = StructureDescriptor::new(2, 2, 4)?;
    let mut bad = 0usize;
    for ht in [2, 4] {
        for wt in [2, 4] {
            let grid = TokenGrid::new(random_tensor(&mut rng, &[1, ht, wt, 4], 1.0), desc)?;
            // out channel o copies input channel o mod c, doubled for the second half
            let w = Tensor::from_fn(&[2, 1, 3, 3], |i| if i[2] == 1 && i[3] == 1 { (i[0] + 1) as f64 } else { 0.0 });
            let out = tokenizer::patch_merge_structured(&grid, &w, None)?;
            let od = out.structure;
            if out.data.shape() != [1, ht / 2, wt / 2, 8] || (od.c, od.h, od.w) != (2, 2, 2) {
                bad += 1;
                continue;
            }
            for ty in 0..ht / 2 {
                for tx in 0..wt / 2 {
                    for k in 0..8 {
                        let (o, i, j) = od.decode(k);
                        let (uy, ux) = (2 * (ty * od.h + i), 2 * (tx * od.w + j));
                        let src = grid.data.get(&[0, uy / desc.h, ux / desc.w, desc.encode(0, uy % desc.h, ux % desc.w)]);
                        if out.data.get(&[0, ty, tx, k]) != (o + 1) as f64 * src {
                            bad += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(bad as f64)
}

pub fn structure_suite(seed: u64, trials: usize) -> Vec<CheckReport> {
    let trials = trials.max(MIN_TRIALS);
    vec![
        run_trials("structure.roundtrip", seed, trials, 0.0, restructure_roundtrip),
        run_trials("structure.index_oracle", seed, trials, 0.0, restructure_index_oracle),
        run_trials("structure.locality", seed, trials, 0.0, locality_violations),
        run_trials("structure.patch_merge", seed, trials.min(4), 0.0, patch_merge_oracle),
    ]
}

// ---------------------------------------------------------------------------
// permutation probe

pub const INVARIANCE_TOL: f64 = 1e-9;
pub const SENSITIVITY_THRESHOLD: f64 = 1e-3;

/// Maximum logit deviation when the tokens produced by the tokenizer are
/// shuffled by `n_perms` random permutations.
pub fn probe_deviation(model: &Model, images: &Tensor, n_perms: usize, seed: u64) -> Result<f64> {
    let mut rng = rng::derived(seed, 5);
    let perms: Vec<Vec<usize>> = (0..n_perms).map(|_| rng::permutation(&mut rng, model.cfg.num_tokens())).collect();
    probe_with_permutations(model, images, &perms)
}

pub fn probe_with_permutations(model: &Model, images: &Tensor, perms: &[Vec<usize>]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &model.params);
    let img = cx.constant(images.clone());
    let tokens = model.tokens(&mut cx, img)?;
    let tokens = cx.value(tokens).detached();
    let reference = {
        let t = cx.constant(tokens.clone());
        let y = model.forward_tokens(&mut cx, t, None)?;
        cx.value(y).detached()
    };
    let mut worst = 0.0f64;
    for p in perms {
        let shuffled = tokens.index_select(1, p)?;
        let t = cx.constant(shuffled);
        let y = model.forward_tokens(&mut cx, t, None)?;
        worst = worst.max(cx.value(y).max_abs_diff(&reference)?);
    }
    Ok(worst)
}

/// Token-set models without positional information must be invariant;
/// anything that reads the token grid must not be.
pub fn expected_bound(cfg: &ModelConfig) -> Bound {
    if cfg.variant == Variant::Transformer && !cfg.pos_emb && !cfg.swat_channel_mix {
        Bound::AtMost
    } else {
        Bound::Above
    }
}

pub fn permutation_probe(model: &Model, images: &Tensor, n_perms: usize, seed: u64) -> CheckReport {
    let bound = expected_bound(&model.cfg);
    let tol = match bound {
        Bound::AtMost => INVARIANCE_TOL,
        Bound::Above => SENSITIVITY_THRESHOLD,
    };
    let name = alloc::format!("perm.{}", arm_name(&model.cfg));
    match probe_deviation(model, images, n_perms, seed) {
        Ok(d) => CheckReport::new(name, d, tol, bound, vec![seed], alloc::format!("{n_perms} permutations")),
        Err(e) => CheckReport::failed(name, tol, bound, vec![seed], &e),
    }
}

fn arm_name(cfg: &ModelConfig) -> &'static str {
    match (cfg.variant, expected_bound(cfg)) {
        (Variant::Transformer, Bound::AtMost) => "transformer_invariant",
        (Variant::Transformer, Bound::Above) => "transformer_sensitive",
        (Variant::Mixer, _) => "mixer_sensitive",
    }
}

/// Dual contract on the tiny configurations: the baseline transformer
/// without positional embedding is invariant under 10 permutations, and the
/// structure-aware channel-mixing models deviate by more than the threshold
/// for every one of 5 seeds (10 permutations each).
pub fn permutation_suite(seed: u64) -> Vec<CheckReport> {
    let mut out = Vec::new();
    let mut irng = rng::derived(seed, 6);
    let images = random_tensor(&mut irng, &[1, 3, 32, 32], 1.0);

    let mut base = ModelConfig::tiny_deit();
    base.pos_emb = false;
    out.push(match Model::build(&base, &InitPolicy::fan_in(seed)) {
        Ok(m) => {
            let mut r = permutation_probe(&m, &images, 10, seed);
            r.name = "perm.baseline_invariant".into();
            r
        }
        Err(e) => CheckReport::failed("perm.baseline_invariant", INVARIANCE_TOL, Bound::AtMost, vec![seed], &e),
    });

    for cfg in probe_configs() {
        let mut cfg = cfg.baseline();
        cfg.swat_channel_mix = true;
        cfg.pos_emb = false;
        let name = match cfg.variant {
            Variant::Transformer => "perm.swat_channel_mix_transformer",
            Variant::Mixer => "perm.swat_channel_mix_mixer",
        };
        let seeds: Vec<u64> = (0..5).map(|i| seed.wrapping_add(i)).collect();
        let mut min_dev = f64::INFINITY;
        let mut err = None;
        for &s in &seeds {
            match Model::build(&cfg, &InitPolicy::fan_in(s)).and_then(|m| probe_deviation(&m, &images, 10, s)) {
                Ok(d) => min_dev = min_dev.min(d),
                Err(e) => {
                    err = Some(e);
                    break;
                }
            }
        }
        out.push(match err {
            Some(e) => CheckReport::failed(name, SENSITIVITY_THRESHOLD, Bound::Above, seeds, &e),
            None => CheckReport::new(name, min_dev, SENSITIVITY_THRESHOLD, Bound::Above, seeds, "min over seeds of max deviation"),
        });
    }
    out
}

// ---------------------------------------------------------------------------
// attention maps

/// Attention weights `(B, heads, N, N)` of block `layer`.
pub fn attention_weights(model: &Model, images: &Tensor, layer: usize) -> Result<Tensor> {
    if model.cfg.variant != Variant::Transformer {
        return Err(Error::Unsupported("attention maps need the transformer variant".into()));
    }
    if layer >= model.cfg.depth {
        return Err(contract_err!("layer {layer} out of range for depth {}", model.cfg.depth));
    }
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &model.params);
    let img = cx.constant(images.clone());
    let tokens = model.tokens(&mut cx, img)?;
    let mut sink = Vec::new();
    model.forward_tokens(&mut cx, tokens, Some(&mut sink))?;
    Ok(cx.value(sink[layer]).detached())
}

/// Attention of block `layer` averaged over batch, heads and query tokens,
/// laid out on the `(Ht, Wt)` token grid and min-max normalized to `[0, 1]`.
/// A constant map normalizes to all zeros.
pub fn attention_map(model: &Model, images: &Tensor, layer: usize) -> Result<Tensor> {
    let a = attention_weights(model, images, layer)?;
    let s = a.shape();
    let (b, h, n) = (s[0], s[1], s[2]);
    let mut avg = vec![0.0; n];
    for chunk in a.data().chunks(n) {
        for (acc, v) in avg.iter_mut().zip(chunk) {
            *acc += v;
        }
    }
    let rows = (b * h * n) as f64;
    avg.iter_mut().for_each(|v| *v /= rows);
    let (lo, hi) = avg.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let norm: Vec<f64> = avg.iter().map(|&v| if span > 1e-15 * hi.abs().max(1.0) { (v - lo) / span } else { 0.0 }).collect();
    let (ht, wt) = model.cfg.grid();
    Tensor::new(&[ht, wt], norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_status_follows_bound() {
        let r = CheckReport::new("x", 1e-6, 1e-5, Bound::AtMost, vec![], "");
        assert!(r.passed());
        let r = CheckReport::new("x", 1e-4, 1e-5, Bound::AtMost, vec![], "");
        assert!(!r.passed());
        let r = CheckReport::new("x", 1e-2, 1e-3, Bound::Above, vec![], "");
        assert!(r.passed());
        let r = CheckReport::new("x", f64::NAN, 1e-3, Bound::AtMost, vec![], "");
        assert!(!r.passed());
    }

    #[test]
    fn linear_grad_check_passes() {
        let mut ps = ParamSet::new();
        let lin = Linear::new(&mut ps, "fc", 3, 2);
        let mut rng = rng::seeded(3);
        randomize_params(&mut ps, &mut rng, 1.0);
        let x = random_tensor(&mut rng, &[2, 3], 1.0);
        let r = grad_check_with("linear", &ps, &[x], 3, &GradCheckConfig::default(), |cx, v| lin.forward(cx, v[0]));
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let cfg = GradCheckConfig { fault: Some(GradFault { op: crate::OpKind::Gelu, factor: 1.5 }), ..Default::default() };
        let mut rng = rng::seeded(4);
        let x = random_tensor(&mut rng, &[2, 3], 1.0);
        let r = grad_check("gelu", &[x], 4, &cfg, |tp, v| tp.gelu(v[0]));
        assert!(!r.passed());
        assert!(r.worst_case > r.tolerance);
    }

    #[test]
    fn non_finite_gradient_fails_with_location() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let cfg = GradCheckConfig { fault: Some(GradFault { op: crate::OpKind::Scale, factor: f64::NAN }), ..Default::default() };
        let r = grad_check("scale", &[x], 1, &cfg, |tp, v| tp.scale(v[0], 2.0));
        assert!(!r.passed());
        assert!(r.detail.contains("input 0"), "{}", r.detail);
    }
}
