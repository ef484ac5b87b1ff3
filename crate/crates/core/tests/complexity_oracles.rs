//! Parameter and FLOP accounting against closed forms, frozen preset totals
//! and the multiply-accumulates actually executed by a forward pass.

use swat_core::blocks::{Model, ModelConfig, Variant};
use swat_core::complexity::{self, SweepAxis};
use swat_core::{Ctx, InitPolicy, Tape, Tensor};

fn totals(cfg: &ModelConfig) -> (u64, u64) {
    let r = complexity::count_params(&Model::uninitialized(cfg).unwrap());
    (r.total_params(), r.total_flops())
}

/// DeiT-Ti from first principles: patch embedding, positional embedding,
/// 12 blocks of (2 norms, qkv, proj, fc1, fc2), final norm, head.
#[test]
fn deit_ti_params_by_hand() {
    let (c, n, l, p, k) = (192u64, 196u64, 12u64, 16u64, 1000u64);
    let embed = 3 * p * p * c + c;
    let block = 2 * 2 * c + (c * 3 * c + 3 * c) + (c * c + c) + (c * 4 * c + 4 * c) + (4 * c * c + c);
    let expected = embed + n * c + l * block + 2 * c + c * k + k;
    assert_eq!(totals(&ModelConfig::deit_ti()).0, expected);
    assert_eq!(expected, 5_717_032);
}

#[test]
fn deit_ti_flops_by_hand() {
    let (c, n, l, p, k) = (192u64, 196u64, 12u64, 16u64, 1000u64);
    let expected = n * 3 * p * p * c + l * complexity::transformer_block_flops(n, c) + c * k;
    assert_eq!(totals(&ModelConfig::deit_ti()).1, expected);
}

#[test]
fn frozen_preset_totals() {
    assert_eq!(totals(&ModelConfig::deit_ti()), (5_717_032, 1_246_563_840));
    assert_eq!(totals(&ModelConfig::mixer_s16()), (18_528_264, 3_776_958_464));
    assert_eq!(totals(&ModelConfig::mixer_ti()), (5_071_112, 963_635_200));
    assert_eq!(totals(&ModelConfig::mixer_ti().swat()), (5_101_580, 1_017_374_720));
}

#[test]
fn sweep_orderings_follow_kernel_and_alpha() {
    let flops = |axis, values: &[usize]| -> Vec<u64> {
        complexity::sweep(&ModelConfig::mixer_ti().swat(), axis, values)
            .into_iter()
            .map(|p| p.report.unwrap().total_flops())
            .collect()
    };
    let k = flops(SweepAxis::Kernel, &[3, 5, 7]);
    assert!(k[0] < k[1] && k[1] < k[2], "{k:?}");
    let a = flops(SweepAxis::Alpha, &[2, 4, 8]);
    assert!(a[0] < a[1] && a[1] < a[2], "{a:?}");
}

#[test]
fn alpha_one_sweep_point_is_the_baseline() {
    let pts = complexity::sweep(&ModelConfig::mixer_ti().swat(), SweepAxis::Alpha, &[1]);
    assert!(!pts[0].config.any_swat());
    assert_eq!(pts[0].report.as_ref().unwrap().total_flops(), totals(&ModelConfig::mixer_ti()).1);
}

#[test]
fn flag_sweep_covers_all_eight_combinations() {
    let values: Vec<usize> = (0..8).collect();
    let pts = complexity::sweep(&ModelConfig::tiny_deit(), SweepAxis::Flags, &values);
    assert!(pts.iter().all(|p| p.report.is_ok()));
    let base = pts[0].report.as_ref().unwrap().total_params();
    assert!(pts[1..].iter().all(|p| p.report.as_ref().unwrap().total_params() != base));
    assert!(complexity::sweep(&ModelConfig::tiny_deit(), SweepAxis::Flags, &[8])[0].report.is_err());
}

#[test]
fn per_row_sums_match_totals_and_parameter_set() {
    for cfg in [ModelConfig::deit_ti().swat(), ModelConfig::mixer_ti().swat(), ModelConfig::tiny_mixer()] {
        let m = Model::uninitialized(&cfg).unwrap();
        let r = complexity::count_params(&m);
        assert_eq!(r.total_params(), m.num_params() as u64);
        assert_eq!(r.rows.iter().map(|x| x.flops).sum::<u64>(), r.total_flops());
        let (p, _) = r.subtotal("blocks.");
        assert!(p > 0 && p < r.total_params());
    }
}

#[test]
fn input_size_must_divide_and_match_token_count() {
    let m = Model::uninitialized(&ModelConfig::deit_ti()).unwrap();
    assert!(complexity::count_flops(&m, 100).is_err());
    assert!(complexity::count_flops(&m, 256).is_err());
    let mut cfg = ModelConfig::deit_ti();
    cfg.pos_emb = false;
    let m = Model::uninitialized(&cfg).unwrap();
    let at_256 = complexity::count_flops(&m, 256).unwrap().total_flops();
    assert!(at_256 > complexity::count_params(&m).total_flops());
}

/// The analytic count equals the multiply-accumulates the tape records for a
/// single-image forward pass, for every flag combination of both variants.
#[test]
fn analytic_flops_equal_executed_macs() {
    for base in [ModelConfig::tiny_deit(), ModelConfig::tiny_mixer()] {
        for mask in 0..8usize {
            let mut cfg = base.clone();
            cfg.swat_tokenize = mask & 1 != 0;
            cfg.swat_token_mix = mask & 2 != 0;
            cfg.swat_channel_mix = mask & 4 != 0;
            let m = Model::build(&cfg, &InitPolicy::new(0)).unwrap();
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, &m.params);
            let x = cx.constant(Tensor::full(&[1, 3, 32, 32], 0.5));
            m.logits(&mut cx, x).unwrap();
            let executed = tape.macs();
            assert_eq!(complexity::count_params(&m).total_flops(), executed, "{:?} mask {mask}", cfg.variant);
        }
    }
}

#[test]
fn closed_form_block_cost_over_a_grid() {
    for c in [8usize, 24, 96] {
        for side in [1usize, 2, 5] {
            let cfg = ModelConfig {
                variant: Variant::Transformer,
                depth: 1,
                embed: c,
                heads: 2,
                token_hidden: 0,
                channel_hidden: 4 * c,
                patch: 2,
                alpha: 1,
                token_mix_kernel: 3,
                channel_mix_kernel: 3,
                pos_emb: true,
                classes: 3,
                image_size: 2 * side,
                swat_tokenize: false,
                swat_token_mix: false,
                swat_channel_mix: false,
            };
            let m = Model::uninitialized(&cfg).unwrap();
            let n = side * side;
            let r = complexity::block_report(&m.params, &m.blocks[0], n, (side, side));
            assert_eq!(r.total_flops(), complexity::transformer_block_flops(n as u64, c as u64));
        }
    }
}
