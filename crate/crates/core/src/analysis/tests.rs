use rand::Rng;

use super::*;
use crate::hici::{GlobalScope, HiCIConfig, HiCIParams};
use crate::params::ParamTree;
use crate::rng;

const TERA: f64 = 1e12;

#[test]
fn llama2_7b_parameter_table() {
    let dims = ModelDims::llama2_7b();
    assert_eq!(dims.base_params(), 6_738_415_616);
    let p = count_params(&HiCIConfig::llama2_7b(), 32, dims.base_params());
    assert_eq!(p.slots, 32_768);
    assert_eq!(p.local_attention, 8_388_608);
    assert_eq!(p.local_subtotal(), 8_421_376);
    assert_eq!(p.compression, 591_104);
    assert_eq!(p.global_queries, 2_048);
    assert_eq!(p.global_attention, 1_048_576);
    assert_eq!(p.expansion, 2_097_153);
    assert_eq!(p.global_subtotal(), 3_738_881);
    assert_eq!(p.per_layer(), 12_160_257);
    assert_eq!(p.total(), 389_128_224);
    assert!((p.overhead() * 100.0 - 5.4595).abs() < 1e-4);
}

#[test]
fn llama2_13b_dims() {
    assert_eq!(ModelDims::llama2_13b().base_params(), 13_015_864_320);
}

#[test]
fn degenerate_config_has_no_overhead() {
    let cfg = HiCIConfig {
        local_slots: 0,
        global_slots: 0,
        d_bottleneck: 0,
        d_compress: 0,
        ..HiCIConfig::micro()
    };
    let p = count_params(&cfg, 4, 1000);
    assert_eq!(p.total(), 0);
    assert_eq!(p.overhead(), 0.0);
}

fn random_config(r: &mut rng::Generator) -> HiCIConfig {
    let heads = r.random_range(1..=3);
    let d_bottleneck = heads * r.random_range(1..=3);
    let d_model = heads * r.random_range(d_bottleneck / heads + 1..=6);
    let local_slots = r.random_range(0..=3);
    let global_slots = if local_slots == 0 {
        0
    } else {
        r.random_range(0..=3)
    };
    HiCIConfig {
        segment_len: r.random_range(1..=4),
        local_slots,
        global_slots,
        heads,
        d_model,
        d_bottleneck: if local_slots == 0 { 0 } else { d_bottleneck },
        d_compress: r.random_range(1..d_bottleneck.max(2)),
        global_scope: if r.random_bool(0.5) {
            GlobalScope::AllSegments
        } else {
            GlobalScope::PrecedingSegments
        },
        ..HiCIConfig::micro()
    }
}

#[test]
fn closed_form_matches_parameter_census() {
    let mut r = rng::generator(11);
    let mut checked = 0;
    while checked < 20 {
        let cfg = random_config(&mut r);
        if cfg.global_slots > 0 && cfg.d_bottleneck < 2 {
            continue;
        }
        cfg.validate().unwrap();
        let params = HiCIParams::init(&cfg, &mut r).unwrap();
        let b = count_params(&cfg, 1, 0);
        assert_eq!(
            b.per_layer() + b.broadcast,
            params.count() as u64,
            "{cfg:?}"
        );
        checked += 1;
    }
}

fn tflops(x: u64) -> f64 {
    x as f64 / TERA
}

/// Rounds to one decimal, as the published table does.
fn shown(x: u64) -> f64 {
    (tflops(x) * 10.0).round() / 10.0
}

#[test]
fn flops_table_columns() {
    let dims = ModelDims::llama2_7b();
    // Context, full attn, S2 attn, proj, ffn, others.
    let table = [
        (8192, 35.2, 8.8, 35.2, 70.9, 2.1),
        (16384, 140.7, 35.2, 70.4, 141.8, 4.3),
        (32768, 562.9, 140.7, 140.7, 283.7, 8.6),
        (65536, 2251.8, 562.9, 281.5, 567.3, 17.2),
        (102400, 5497.6, 1374.4, 439.8, 886.5, 26.8),
    ];
    for (t, full_attn, seg_attn, proj, ffn, others) in table {
        let cfg = quarter_segments(&HiCIConfig::llama2_7b(), t);
        let full = count_flops(Method::Full, t, &dims, &cfg).unwrap();
        let seg = count_flops(Method::Segmented, t, &dims, &cfg).unwrap();
        assert_eq!(shown(full.attn), full_attn, "{t}");
        assert_eq!(shown(seg.attn), seg_attn, "{t}");
        assert_eq!(shown(full.proj), proj, "{t}");
        assert_eq!(shown(full.ffn), ffn, "{t}");
        assert_eq!(shown(full.others), others, "{t}");
        let hici = count_flops(Method::Hici, t, &dims, &cfg).unwrap();
        let ratio = hici.total() as f64 / seg.total() as f64;
        assert!((1.0..=1.03).contains(&ratio), "{t}: {ratio}");
    }
}

#[test]
fn lc_gi_is_dominated_by_key_value_projections() {
    let dims = ModelDims::llama2_7b();
    let cfg = quarter_segments(&HiCIConfig::llama2_7b(), 8192);
    let c = count_flops(Method::Hici, 8192, &dims, &cfg).unwrap();
    let main = 32 * 4 * 8192 * 4096 * 512u64;
    assert_eq!(shown(c.lc_gi), 2.2);
    assert!(c.lc_gi > main && (c.lc_gi as f64) < 1.05 * main as f64);
    assert_eq!(c.total(), c.attn + c.proj + c.ffn + c.others + c.lc_gi);
}

#[test]
fn segmented_costs_need_divisible_context() {
    let dims = ModelDims::llama2_7b();
    let cfg = HiCIConfig::llama2_7b();
    assert!(count_flops(Method::Segmented, 3000, &dims, &cfg).is_err());
    assert!(count_flops(Method::Full, 3000, &dims, &cfg).is_ok());
}

#[test]
fn analytic_module_flops_match_counter() {
    let mut cfgs = vec![HiCIConfig::micro(), probe_config()];
    cfgs.push(HiCIConfig {
        global_scope: GlobalScope::PrecedingSegments,
        ..HiCIConfig::micro()
    });
    cfgs.push(HiCIConfig {
        global_slots: 0,
        d_compress: 0,
        ..HiCIConfig::micro()
    });
    for cfg in cfgs {
        for n in [1, 2, 5] {
            let row = probe(&cfg, n * cfg.segment_len, 1).unwrap();
            assert_eq!(row.counted_module(), row.analytic, "{cfg:?} n={n}");
        }
    }
}

#[test]
fn doubling_context_doubles_cost() {
    let cfg = probe_config();
    let s = cfg.segment_len;
    let rows = scaling_probe(&cfg, &[2 * s, 4 * s, 8 * s, 16 * s], 0).unwrap();
    for r in ratios(&rows) {
        assert!((1.98..=2.02).contains(&r), "{r}");
    }
    assert!(rows.iter().all(|r| r.global_rows == cfg.global_slots));
    assert!(rows
        .iter()
        .all(|r| r.global_bytes(cfg.d_model) == 4 * 64 * 8));
}

#[test]
fn doubling_segment_at_fixed_context() {
    let base = HiCIConfig {
        segment_len: 128,
        ..probe_config()
    };
    let wide = HiCIConfig {
        segment_len: 256,
        ..base
    };
    let a = probe(&base, 1024, 0)
        .unwrap()
        .counted_module()
        .broadcast_attn;
    let b = probe(&wide, 1024, 0)
        .unwrap()
        .counted_module()
        .broadcast_attn;
    let extra = (base.local_slots + base.global_slots) as f64;
    let expected = (256.0 + extra) / (128.0 + extra);
    assert!((b as f64 / a as f64 - expected).abs() < 1e-12);
    assert!(b as f64 / a as f64 > 1.9);
}
