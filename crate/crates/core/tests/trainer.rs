use patchpool::dataio::synth_shapes;
use patchpool::model::{build_model, ModelConfig, ParamStore};
use patchpool::numerics::Tensor;
use patchpool::trainer::{
    evaluate, finetune_resolution, fit, half_cosine_lr, label_smoothing_ce, lamb_step, sweep, CellStatus,
    OptimConfig, OptimMode, OptimState, SweepGrid, TrainPlan,
};
use patchpool::Error;
use proptest::prelude::*;

fn store(values: &[(&str, Vec<f64>, bool)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, v, decay) in values {
        s.add(*name, Tensor::new(&[v.len()], v.clone()).unwrap(), *decay);
    }
    s
}

fn set_grads(s: &mut ParamStore, grads: &[Vec<f64>]) {
    for (p, g) in s.iter_mut().zip(grads) {
        p.tensor.grad = Some(g.clone());
    }
}

fn adamw(lr: f64, wd: f64) -> OptimConfig {
    OptimConfig {
        base_lr: lr,
        weight_decay: wd,
        mode: OptimMode::AdamW,
        ..OptimConfig::default()
    }
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    for mode in [OptimMode::Lamb, OptimMode::AdamW] {
        let mut s = store(&[("w", vec![0.3, -1.2, 2.0], true), ("b", vec![0.0, 0.5], false)]);
        let before = s.tensors();
        let hp = OptimConfig {
            weight_decay: 0.0,
            mode,
            ..OptimConfig::default()
        };
        let mut st = OptimState::new(&s, hp);
        set_grads(&mut s, &[vec![0.0; 3], vec![0.0; 2]]);
        lamb_step(&mut s, &mut st, 0.1).unwrap();
        for (a, b) in s.tensors().iter().zip(&before) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(st.step, 1);
    }
}

#[test]
fn adamw_scalar_step_matches_hand_value() {
    let (w0, g, lr, wd) = (0.8, 0.5, 0.1, 0.01);
    let hp = adamw(lr, wd);
    let mut s = store(&[("w", vec![w0], true)]);
    let mut st = OptimState::new(&s, hp);
    set_grads(&mut s, &[vec![g]]);
    lamb_step(&mut s, &mut st, lr).unwrap();
    // first step: m_hat = g, v_hat = g^2
    let expected = w0 - lr * (g / (g.abs() + hp.eps) + wd * w0);
    assert!((s.get(0).tensor.data()[0] - expected).abs() < 1e-15);
}

#[test]
fn lamb_with_unit_trust_ratio_equals_adamw() {
    let hp = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    // unit gradients make the first direction exactly 1 / (1 + eps) per entry
    let w = vec![1.0 / (1.0 + hp.eps); 4];
    let run = |mode| {
        let mut s = store(&[("w", w.clone(), true)]);
        let mut st = OptimState::new(&s, OptimConfig { mode, ..hp });
        set_grads(&mut s, &[vec![1.0; 4]]);
        lamb_step(&mut s, &mut st, 0.05).unwrap();
        s.get(0).tensor.data().to_vec()
    };
    assert_eq!(run(OptimMode::Lamb), run(OptimMode::AdamW));
}

#[test]
fn decoupled_decay_scales_weights_exactly() {
    let (lr, wd) = (0.02, 0.3);
    let w = vec![1.5, -0.25, 3.0];
    let mut s = store(&[("w", w.clone(), true), ("gamma", vec![0.7], false)]);
    let mut st = OptimState::new(&s, adamw(lr, wd));
    set_grads(&mut s, &[vec![0.0; 3], vec![0.0]]);
    lamb_step(&mut s, &mut st, lr).unwrap();
    for (a, b) in s.get(0).tensor.data().iter().zip(&w) {
        assert_eq!(*a, b * (1.0 - lr * wd));
    }
    assert_eq!(s.get(1).tensor.data(), [0.7]);
}

#[test]
fn zero_norm_tensors_use_unit_ratio() {
    let hp = OptimConfig {
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let mut s = store(&[("b", vec![0.0, 0.0], false)]);
    let mut st = OptimState::new(&s, hp);
    set_grads(&mut s, &[vec![2.0, -2.0]]);
    lamb_step(&mut s, &mut st, 0.1).unwrap();
    let d = s.get(0).tensor.data();
    let step = 0.1 * 2.0 / (2.0 + hp.eps);
    assert!((d[0] + step).abs() < 1e-15 && (d[1] - step).abs() < 1e-15);
}

#[test]
fn optimizer_contract_errors() {
    let mut s = store(&[("w", vec![1.0, 2.0], true)]);
    let mut st = OptimState::new(&s, OptimConfig::default());
    assert!(matches!(lamb_step(&mut s, &mut st, 0.1), Err(Error::Contract(_))));
    set_grads(&mut s, &[vec![1.0]]);
    assert!(matches!(lamb_step(&mut s, &mut st, 0.1), Err(Error::Contract(_))));
    let mut other = store(&[("w", vec![1.0, 2.0], true), ("v", vec![1.0], true)]);
    set_grads(&mut other, &[vec![1.0, 1.0], vec![1.0]]);
    assert!(matches!(lamb_step(&mut other, &mut st, 0.1), Err(Error::Contract(_))));
    assert_eq!(st.step, 0);
}

#[test]
fn schedule_landmarks() {
    let (base, min) = (3e-3, 1e-5);
    assert_eq!(half_cosine_lr(10, 110, base, min, 10).unwrap(), base);
    assert!((half_cosine_lr(110, 110, base, min, 10).unwrap() - min).abs() < 1e-18);
    assert!((half_cosine_lr(60, 110, base, min, 10).unwrap() - (base + min) / 2.0).abs() < 1e-15);
    assert_eq!(half_cosine_lr(0, 110, base, min, 10).unwrap(), 0.0);
    assert!((half_cosine_lr(5, 110, base, min, 10).unwrap() - base / 2.0).abs() < 1e-18);
    assert_eq!(half_cosine_lr(0, 100, base, min, 0).unwrap(), base);
    assert!(matches!(half_cosine_lr(111, 110, base, min, 10), Err(Error::Contract(_))));
    assert!(matches!(half_cosine_lr(0, 10, base, min, 10), Err(Error::Contract(_))));
}

#[test]
fn label_smoothing_values() {
    let uniform = Tensor::zeros(&[2, 5]);
    for eps in [0.0, 0.1, 0.5] {
        let l = label_smoothing_ce(&uniform, &[0, 3], eps).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-14);
    }
    let logits = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
    let lse = (2f64.exp() + 1.0).ln();
    let expected = -(0.95 * (2.0 - lse) + 0.05 * (0.0 - lse));
    assert!((label_smoothing_ce(&logits, &[0], 0.1).unwrap() - expected).abs() < 1e-14);
    let plain = -(2.0 - lse);
    assert!((label_smoothing_ce(&logits, &[0], 0.0).unwrap() - plain).abs() < 1e-14);
    assert!(matches!(label_smoothing_ce(&logits, &[2], 0.1), Err(Error::Data(_))));
}

fn tiny_plan(epochs: usize) -> TrainPlan {
    TrainPlan {
        epochs,
        ..TrainPlan::desk()
    }
}

#[test]
fn zero_epochs_leave_model_untouched() {
    let (train, val) = synth_shapes(4, 32, 0).unwrap();
    let mut m = build_model(&ModelConfig::preset("desk8").unwrap(), 0).unwrap();
    let before = m.params.clone();
    let log = fit(&mut m, &train, &val, &tiny_plan(0), None).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(m.params, before);
}

#[test]
fn same_seed_same_log_and_weights() {
    let (train, val) = synth_shapes(8, 32, 1).unwrap();
    let cfg = ModelConfig::preset("desk8").unwrap();
    let plan = TrainPlan {
        drop_path: 0.1,
        ..tiny_plan(2)
    };
    let run = || {
        let mut m = build_model(&cfg, 3).unwrap();
        let log = fit(&mut m, &train, &val, &plan, None).unwrap();
        (log, m.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.epochs.len(), 2);
    assert_eq!(a.epochs[1].step, 2 * 24usize.div_ceil(16));
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let (train, val) = synth_shapes(2, 32, 0).unwrap();
    let cfg = ModelConfig {
        num_classes: 5,
        ..ModelConfig::preset("desk8").unwrap()
    };
    let mut m = build_model(&cfg, 0).unwrap();
    assert!(matches!(fit(&mut m, &train, &val, &tiny_plan(1), None), Err(Error::Config(_))));
}

#[test]
fn nan_loss_reports_divergence_step() {
    let (train, val) = synth_shapes(4, 32, 0).unwrap();
    let mut m = build_model(&ModelConfig::preset("desk8").unwrap(), 0).unwrap();
    m.params.by_name_mut("head.bias").unwrap().data_mut()[0] = f64::NAN;
    match fit(&mut m, &train, &val, &tiny_plan(2), None) {
        Err(Error::Divergence { epoch, step, .. }) => assert_eq!((epoch, step), (1, 1)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn eval_ignores_drop_path_setting() {
    let (train, _) = synth_shapes(4, 32, 0).unwrap();
    let mut m = build_model(&ModelConfig::preset("desk32").unwrap(), 0).unwrap();
    m.set_layerscale(0.5);
    let (x, _) = train.batch(&[0, 1, 2, 3]).unwrap();
    let a = m.eval(&x).unwrap().logits;
    m.config.drop_path = 0.5;
    let b = m.eval(&x).unwrap().logits;
    assert_eq!(a, b);
}

#[test]
fn checkpoints_and_log_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = patchpool::trainer::Outputs {
        dir: dir.path().join("run"),
    };
    let (train, val) = synth_shapes(4, 32, 0).unwrap();
    let mut m = build_model(&ModelConfig::preset("desk8").unwrap(), 0).unwrap();
    let log = fit(&mut m, &train, &val, &tiny_plan(2), Some(&out)).unwrap();
    let text = std::fs::read_to_string(out.log_path()).unwrap();
    assert_eq!(text, log.to_csv());
    assert!(text.starts_with("epoch,step,lr,train_loss,train_acc,val_acc\n"));
    let last = patchpool::model::checkpoint::load(&out.last_path()).unwrap();
    assert_eq!(last.params, m.params);
    assert!(out.best_path().exists());
}

#[test]
fn resolution_transfer_without_weight_surgery() {
    let (train, val) = synth_shapes(30, 32, 4).unwrap();
    let cfg = ModelConfig::preset("desk32").unwrap();
    let untrained = build_model(&cfg, 4).unwrap();
    let mut m = untrained.clone();
    fit(&mut m, &train, &val, &tiny_plan(15), None).unwrap();
    let names: Vec<_> = m.params.iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect();
    let finetune = |epochs| TrainPlan {
        epochs,
        ..TrainPlan::for_mode(patchpool::trainer::PlanMode::Finetune)
    };

    let mut zero = m.clone();
    let log = finetune_resolution(&mut zero, &train, &val, 64, &finetune(0), None).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(zero.params, m.params);
    let val64 = val.resized(64).unwrap();
    evaluate(&zero, &val64).unwrap();

    let log = finetune_resolution(&mut m, &train, &val, 64, &finetune(3), None).unwrap();
    let after: Vec<_> = m.params.iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect();
    assert_eq!(names, after);
    let (floor, _) = evaluate(&untrained, &val64).unwrap();
    let acc = log.last().unwrap().val_acc;
    assert!(acc >= floor, "{acc} < {floor}");
    assert!(matches!(
        finetune_resolution(&mut m, &train, &val, 40, &finetune(1), None),
        Err(Error::Resolution(_))
    ));
}

#[test]
fn single_cell_sweep_equals_fit() {
    let (train, val) = synth_shapes(6, 32, 2).unwrap();
    let cfg = ModelConfig::preset("desk8").unwrap();
    let plan = tiny_plan(2);
    let grid = SweepGrid {
        lr: vec![plan.base_lr],
        weight_decay: vec![plan.weight_decay],
        drop_path: vec![plan.drop_path],
    };
    let report = sweep(&grid, &plan, &cfg, 9, &train, &val).unwrap();
    let mut m = build_model(&cfg, 9).unwrap();
    let log = fit(&mut m, &train, &val, &plan, None).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].val_acc, log.last().unwrap().val_acc);
    assert_eq!(report.rows[0].status, CellStatus::Ok);
}

#[test]
fn sweep_records_divergence_and_continues() {
    let (train, val) = synth_shapes(20, 32, 0).unwrap();
    let cfg = ModelConfig::preset("desk8").unwrap();
    let plan = tiny_plan(4);
    let grid = SweepGrid {
        lr: vec![plan.base_lr, 10.0],
        weight_decay: vec![0.0, 0.01],
        drop_path: vec![0.0],
    };
    let report = sweep(&grid, &plan, &cfg, 0, &train, &val).unwrap();
    assert_eq!(report.rows.len(), 4);
    let failed: Vec<_> = report.rows.iter().filter(|r| r.status != CellStatus::Ok).collect();
    assert_eq!(failed.len(), 2);
    assert!(failed.iter().all(|r| r.lr == 10.0));
    assert!(report.rows[..2].iter().all(|r| r.status == CellStatus::Ok));
    assert!(report.rows[0].val_acc >= report.rows[1].val_acc);
    let csv = report.to_csv();
    assert!(csv.starts_with("lr,weight_decay,drop_path,val_acc,status\n"));
    assert!(csv.contains(",failed@"));
    let empty = SweepGrid {
        lr: vec![],
        ..grid
    };
    assert!(sweep(&empty, &plan, &cfg, 0, &train, &val).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn unit_trust_clip_makes_lamb_bitwise_adamw(
        w in proptest::collection::vec(-2.0f64..2.0, 1..6),
        grads in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 1..4),
        wd in 0.0f64..0.1,
        lr in 1e-4f64..0.1,
    ) {
        let n = w.len();
        let run = |mode, clip| {
            let mut s = store(&[("w", w.clone(), true)]);
            let hp = OptimConfig { weight_decay: wd, trust_clip: clip, mode, ..OptimConfig::default() };
            let mut st = OptimState::new(&s, hp);
            for g in &grads {
                set_grads(&mut s, &[g[..n].to_vec()]);
                lamb_step(&mut s, &mut st, lr).unwrap();
            }
            (s.get(0).tensor.data().to_vec(), st.step)
        };
        let (a, sa) = run(OptimMode::Lamb, (1.0, 1.0));
        let (b, sb) = run(OptimMode::AdamW, (0.01, 10.0));
        prop_assert_eq!(a, b);
        prop_assert_eq!(sa, grads.len() as u64);
        prop_assert_eq!(sb, grads.len() as u64);
    }

    #[test]
    fn one_step_decreases_convex_quadratic(
        w in proptest::collection::vec(0.5f64..2.0, 1..6),
        curv in proptest::collection::vec(0.5f64..4.0, 6),
        lr in 1e-4f64..0.2,
        lamb in any::<bool>(),
    ) {
        // 0.5 * sum(a w^2); the first Adam step moves each coordinate by about lr
        let loss = |w: &[f64]| w.iter().zip(&curv).map(|(w, a)| 0.5 * a * w * w).sum::<f64>();
        let mode = if lamb { OptimMode::Lamb } else { OptimMode::AdamW };
        let mut s = store(&[("w", w.clone(), false)]);
        let mut st = OptimState::new(&s, OptimConfig { mode, ..OptimConfig::default() });
        let g: Vec<f64> = w.iter().zip(&curv).map(|(w, a)| a * w).collect();
        set_grads(&mut s, &[g]);
        lamb_step(&mut s, &mut st, lr).unwrap();
        prop_assert!(loss(s.get(0).tensor.data()) < loss(&w));
    }
}
