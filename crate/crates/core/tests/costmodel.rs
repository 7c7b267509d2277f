use patchpool::costmodel::{
    activation_memory, count_flops, count_params, cost_report, flop_breakdown, memory_breakdown, scaling_report,
};
use patchpool::model::{build_model, HeadMode, ModelConfig, NormKind, StemKind, TokenMode, PRESETS};
use patchpool::numerics::Tensor;

fn preset(name: &str) -> ModelConfig {
    ModelConfig::preset(name).unwrap()
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    ((value - target) / target).abs() <= tol
}

fn variants(base: &ModelConfig) -> Vec<ModelConfig> {
    let mut out = vec![base.clone()];
    out.push(ModelConfig { token_mode: TokenMode::PerClass, ..base.clone() });
    out.push(ModelConfig { head_mode: HeadMode::AveragePool, ..base.clone() });
    out.push(ModelConfig { stem_kind: StemKind::LinearProjection, ..base.clone() });
    out.push(ModelConfig { norm_kind: NormKind::BatchNorm, attention_heads: 4, ..base.clone() });
    out
}

#[test]
fn published_parameter_counts() {
    for (name, target) in [("S60", 25.2e6), ("S120", 47.7e6), ("B60", 99.4e6), ("B120", 188.6e6)] {
        let p = count_params(&preset(name)) as f64;
        assert!(within(p, target, 0.05), "{name}: {p}");
    }
}

#[test]
fn published_flop_counts() {
    for (name, res, target) in [("S60", 224, 4.0e9), ("S60", 288, 6.6e9), ("S60", 384, 11.8e9), ("S60", 512, 20.9e9), ("B60", 224, 15.8e9), ("B120", 224, 29.9e9)] {
        let f = count_flops(&preset(name), res, res).unwrap() as f64;
        assert!(within(f, target, 0.10), "{name}@{res}: {f}");
    }
}

#[test]
fn params_equal_built_model_enumeration_for_desk_configs() {
    for name in ["desk8", "desk32"] {
        for cfg in variants(&preset(name)) {
            let m = build_model(&cfg, 0).unwrap();
            let enumerated: usize = m.params.iter().map(|p| p.tensor.numel()).sum();
            assert_eq!(count_params(&cfg), enumerated as u64, "{cfg:?}");
        }
    }
}

#[test]
fn params_equal_built_model_enumeration_for_paper_presets() {
    for name in PRESETS.iter().filter(|p| p.starts_with('S') || p.starts_with('B')) {
        let cfg = preset(name);
        let m = build_model(&cfg, 0).unwrap();
        let enumerated: usize = m.params.iter().map(|p| p.tensor.numel()).sum();
        assert_eq!(count_params(&cfg), enumerated as u64, "{name}");
    }
}

#[test]
fn flops_match_instrumented_forward() {
    for name in ["desk8", "desk32"] {
        for cfg in variants(&preset(name)) {
            let m = build_model(&cfg, 0).unwrap();
            for (h, w) in [(32, 32), (64, 48)] {
                let batch = 2;
                let out = m.eval(&Tensor::full(&[batch, 3, h, w], 0.1)).unwrap();
                let counted = out.macs as f64 / batch as f64;
                let closed = count_flops(&cfg, h, w).unwrap() as f64;
                assert!(within(closed, counted, 0.01), "{cfg:?} {h}x{w}: {closed} vs {counted}");
            }
        }
    }
}

#[test]
fn breakdown_sums_to_totals() {
    let cfg = preset("S60");
    let r = cost_report(&cfg, 224, 224, 8, 4).unwrap();
    assert_eq!(r.param_breakdown.total(), r.params);
    assert_eq!(r.flop_breakdown.total(), r.flops);
    assert_eq!(r.params, count_params(&cfg));
    assert_eq!(cost_report(&cfg, 384, 384, 1, 2).unwrap().params, r.params);
}

#[test]
fn trunk_flops_scale_with_patch_count() {
    let cfg = preset("S60");
    let a = flop_breakdown(&cfg, 224, 224).unwrap();
    let b = flop_breakdown(&cfg, 448, 448).unwrap();
    assert_eq!(b.trunk_spatial, 4 * a.trunk_spatial);
    assert_eq!(b.trunk_gating, a.trunk_gating);
    let c = flop_breakdown(&cfg, 448, 224).unwrap();
    assert_eq!(c.aggregation_patch, 2 * a.aggregation_patch);
}

#[test]
fn flops_and_memory_increase_with_surface() {
    let cfg = preset("desk32");
    let mut last = (0, 0);
    for r in (32..=256).step_by(16) {
        let now = (count_flops(&cfg, r, r).unwrap(), activation_memory(&cfg, r, r, 1, 4).unwrap());
        assert!(now.0 > last.0 && now.1 > last.1);
        last = now;
    }
}

#[test]
fn trunk_memory_is_depth_independent_and_linear() {
    let s20 = memory_breakdown(&preset("S20"), 224, 224).unwrap();
    let s120 = memory_breakdown(&preset("S120"), 224, 224).unwrap();
    assert_eq!(s20.trunk_steady, s120.trunk_steady);
    let big = memory_breakdown(&preset("S20"), 448, 224).unwrap();
    assert_eq!(big.trunk_steady, 2 * s20.trunk_steady);
}

#[test]
fn desk_memory_matches_buffer_enumeration() {
    // d = 4, 32x32 input, batch 1, 8-byte elements.
    let cfg = ModelConfig { width: 4, se_reduction: 2, ..preset("desk8") };
    let (d, hw, n, t) = (4u64, 32u64, 4u64, 1u64);
    // Stem ladder 1, 1, 2, 4 channels at 16, 8, 4, 2 pixels.
    let stem_buffers = [
        vec![3 * hw * hw, 16 * 16],
        vec![16 * 16, 8 * 8],
        vec![8 * 8, 2 * 4 * 4],
        vec![2 * 4 * 4, d * 2 * 2],
    ];
    let trunk_buffers = vec![n * d, n * d, n * d];
    let agg_buffers = vec![n * d, n * d, n * d, n * d, t * n];
    let peak = stem_buffers
        .iter()
        .map(|b| b.iter().sum::<u64>())
        .chain([trunk_buffers.iter().sum(), agg_buffers.iter().sum()])
        .max()
        .unwrap();
    assert_eq!(activation_memory(&cfg, 32, 32, 1, 8).unwrap(), peak * 8);
}

#[test]
fn s60_scaling_table() {
    let r = scaling_report(&preset("S60"), &[224, 288, 384, 512], 1, 4).unwrap();
    let base = r.rows[0].flops as f64;
    for (row, want) in r.rows.iter().zip([1.0, 1.65, 2.94, 5.22]) {
        let got = row.flops as f64 / base;
        assert!(((got - want) / want).abs() <= 0.02, "{}: {got}", row.resolution);
    }
    assert!(r.r_squared.unwrap() >= 0.999);
    assert!(scaling_report(&preset("S60"), &[224, 200], 1, 4).is_err());
}

#[test]
fn memory_ratio_tends_to_two() {
    let cfg = preset("S60");
    for r in [224, 320, 448] {
        let a = activation_memory(&cfg, r, r, 1, 4).unwrap() as f64;
        let b = activation_memory(&cfg, 2 * r, r, 1, 4).unwrap() as f64;
        assert!((b / a - 2.0).abs() < 1e-3);
    }
}
