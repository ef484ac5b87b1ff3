//! Tokenizer, block and model assembly contracts.

use swat_core::blocks::{Model, ModelConfig, SwatAttentionMix, Variant};
use swat_core::nn::ParamSet;
use swat_core::tokenizer::{self, StemConfig, StructureDescriptor, Tokenizer};
use swat_core::{Ctx, Error, InitPolicy, Tape, Tensor};

#[test]
fn every_flag_combination_builds_and_runs() {
    for base in [ModelConfig::tiny_deit(), ModelConfig::tiny_mixer()] {
        for mask in 0..8usize {
            let mut cfg = base.clone();
            cfg.swat_tokenize = mask & 1 != 0;
            cfg.swat_token_mix = mask & 2 != 0;
            cfg.swat_channel_mix = mask & 4 != 0;
            let m = Model::build(&cfg, &InitPolicy::new(mask as u64)).unwrap();
            let y = m.forward_classify(&Tensor::full(&[2, 3, 32, 32], 0.1)).unwrap();
            assert_eq!(y.shape(), &[2, 4]);
            assert!(y.is_finite());
        }
    }
}

#[test]
fn bottleneck_stem_reaches_the_sub_patch_grid() {
    let desc = StructureDescriptor::new(16, 4, 192).unwrap();
    let stem = StemConfig::bottleneck(&desc).unwrap();
    assert_eq!(stem.cumulative_stride(), 4);
    assert_eq!(stem.layers.len(), 3);
    assert_eq!(stem.layers.last().unwrap().out_channels, desc.c);
    stem.validate(&desc).unwrap();
    let odd = StructureDescriptor::new(12, 2, 16).unwrap();
    assert!(matches!(StemConfig::bottleneck(&odd), Err(Error::Config(_))));
    assert!(StructureDescriptor::new(12, 2, 18).is_err());
}

#[test]
fn stem_parameter_closed_form_matches_registered_tensors() {
    let desc = StructureDescriptor::new(16, 8, 192).unwrap();
    let stem = StemConfig::bottleneck(&desc).unwrap();
    let mut ps = ParamSet::new();
    Tokenizer::new(&mut ps, "tok", desc, stem.clone()).unwrap();
    assert_eq!(ps.numel(), stem.param_count());
}

#[test]
fn tokenizer_output_is_a_structured_grid() {
    let desc = StructureDescriptor::new(8, 2, 16).unwrap();
    let mut ps = ParamSet::new();
    let tk = Tokenizer::new(&mut ps, "tok", desc, StemConfig::bottleneck(&desc).unwrap()).unwrap();
    ps.init(&InitPolicy::new(0));
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &ps);
    let x = cx.constant(Tensor::full(&[2, 3, 16, 24], 0.5));
    let y = tk.forward(&mut cx, x).unwrap();
    assert_eq!(cx.shape(y), &[2, 2, 3, 16]);
    let bad = cx.constant(Tensor::full(&[1, 3, 12, 16], 0.5));
    assert!(matches!(tk.forward(&mut cx, bad), Err(Error::Shape(_))));
}

#[test]
fn single_conv_tokenizer_is_restructured_sub_patch_conv() {
    // with one conv the tokenizer equals restructure(conv_{p/α}(image))
    let desc = StructureDescriptor::new(4, 2, 8).unwrap();
    let mut rng = swat_core::rng::seeded(1);
    let img = swat_core::verify::random_tensor(&mut rng, &[1, 3, 8, 8], 1.0);
    let w = swat_core::verify::random_tensor(&mut rng, &[2, 3, 2, 2], 1.0);
    let grid = tokenizer::swat_tokenize(&img, &desc, &w, None).unwrap();
    let inter = swat_core::verify::oracles::conv2d(&img, &w, None, 2, 0, 1);
    assert_eq!(grid, tokenizer::restructure(&inter, &desc).unwrap());
}

#[test]
fn delta_conv_branch_yields_a_pure_channel_map() {
    // linear weights zero, conv = 2·delta mapping output channel o to input o mod c:
    // qkv becomes [x | x | x] per token
    let cfg = swat_core::verify::small_block_config();
    let desc = cfg.structure().unwrap();
    let mut ps = ParamSet::new();
    let m = SwatAttentionMix::new(&mut ps, "tm", &cfg, desc).unwrap();
    let qkv_w = ps.tensor(m.qkv_conv.weight).shape().to_vec();
    let delta = Tensor::from_fn(&qkv_w, |i| if i[1] == i[0] % desc.c && i[2] == 1 && i[3] == 1 { 2.0 } else { 0.0 });
    ps.assign(m.qkv_conv.weight, &delta).unwrap();
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, &ps);
    let mut rng = swat_core::rng::seeded(2);
    let x = swat_core::verify::random_tensor(&mut rng, &[1, 4, 8], 1.0);
    let xv = cx.constant(x.clone());
    let qkv = m.qkv(&mut cx, xv).unwrap();
    let v = cx.value(qkv);
    for t in 0..4 {
        for part in 0..3 {
            for k in 0..8 {
                assert_eq!(v.get(&[0, t, part * 8 + k]), x.get(&[0, t, k]));
            }
        }
    }
}

#[test]
fn unsupported_shapes_are_rejected_by_config() {
    let mut cfg = ModelConfig::tiny_mixer().swat();
    cfg.alpha = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::tiny_deit();
    cfg.variant = Variant::Transformer;
    cfg.embed = 18;
    assert!(cfg.validate().is_err());
}
