use patchpool::numerics::{grad_check, BatchNormState, ConvGeom, NormMode, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Seven-loop direct cross-correlation; accumulates in (ci, ky, kx) order,
/// bias added last.
fn naive_conv(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Vec<f64> {
    let [b, cin, h, w] = x.shape().try_into().unwrap();
    let [cout, cin_g, kh, kw] = k.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;
    let xd = x.data();
    let kd = k.data();
    let mut out = Vec::new();
    for bi in 0..b {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let c = g * cin_g + ci;
                                acc += xd[((bi * cin + c) * h + iy as usize) * w + ix as usize]
                                    * kd[((co * cin_g + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        acc += bias.data()[co];
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 4], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let mut expected = vec![0.0; 15];
    for r in 0..3 {
        for o in 0..5 {
            let mut acc = 0.0;
            for i in 0..4 {
                acc += x.data()[r * 4 + i] * w.data()[o * 4 + i];
            }
            expected[r * 5 + o] = acc;
        }
    }
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(&x), tape.constant(&w));
    let y = tape.linear(xv, wv, None).unwrap();
    assert_eq!(tape.shape(y), &[3, 5]);
    assert_eq!(tape.value(y), &expected[..]);
}

#[test]
fn conv_matches_naive_on_reference_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[1, 3, 5, 5], &mut rng);
    let k = random(&[2, 3, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(&x), tape.constant(&k));
    let y = tape.conv2d(xv, kv, None, ConvGeom::new(1, 1, 1)).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 5, 5]);
    assert_eq!(tape.value(y), &naive_conv(&x, &k, None, 1, 1, 1)[..]);
}

#[test]
fn conv_bitwise_equal_to_naive_over_shape_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = 0;
    for b in 1..=2 {
        for cin in [1, 2, 4] {
            for hw in [4, 6, 9] {
                for stride in [1, 2] {
                    for pad in [0, 1, 2] {
                        for groups in [1, cin] {
                            for ks in [1, 3] {
                                let cout = if groups == 1 { 3 } else { cin };
                                let x = random(&[b, cin, hw, hw - 1], &mut rng);
                                let k = random(&[cout, cin / groups, ks, ks], &mut rng);
                                let bias = random(&[cout], &mut rng);
                                let mut tape = Tape::new();
                                let (xv, kv, bv) =
                                    (tape.constant(&x), tape.constant(&k), tape.constant(&bias));
                                let y = tape
                                    .conv2d(xv, kv, Some(bv), ConvGeom::new(stride, pad, groups))
                                    .unwrap();
                                let expected = naive_conv(&x, &k, Some(&bias), stride, pad, groups);
                                assert_eq!(tape.value(y), &expected[..]);
                                cases += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    assert!(cases > 300);
}

/// erf by its Maclaurin series, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x; // (-1)^n x^(2n+1) / n!
    let mut n = 0.0;
    loop {
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 {
            break;
        }
        n += 1.0;
        term *= -x * x / n;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_matches_series_oracle() {
    for &x in &[1.0, -0.7, 2.3, 0.01] {
        let expected = 0.5 * x * (1.0 + erf_series(x / 2f64.sqrt()));
        let got = patchpool::numerics::tape::gelu(x);
        assert!((got - expected).abs() < 1e-15, "x={x} got={got} expected={expected}");
    }
}

#[test]
fn global_avg_pool_matches_explicit_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 3, 4, 5], &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(&x);
    let y = tape.global_avg_pool(xv).unwrap();
    for (c, chunk) in x.data().chunks(20).enumerate() {
        let mut s = 0.0;
        for v in chunk {
            s += v;
        }
        assert!((tape.value(y)[c] - s / 20.0).abs() < 1e-15);
    }
}

fn check(f: impl Fn(&mut Tape, &[Var]) -> patchpool::Result<Var>, inputs: &[Tensor]) {
    let r = grad_check(f, inputs, 1e-5, 1e-4).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn linear_gradient_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&[3, 4], &mut rng), random(&[2, 4], &mut rng), random(&[2], &mut rng)];
    let r = grad_check(
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            Ok(t.sum(y))
        },
        &inputs,
        1e-5,
        1e-7,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn gelu_gradient_at_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::from_fn(&[20], |_| rng.random_range(-4.0..4.0));
    let r = grad_check(
        |t, v| {
            let y = t.gelu(v[0]);
            Ok(t.sum(y))
        },
        &[x],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

/// A fixed random projection turns any tensor into a scalar with a
/// non-trivial gradient everywhere.
fn project(t: &mut Tape, y: Var, seed: u64) -> patchpool::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = t.shape(y).to_vec();
    let w = t.constant(&Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_op_gradient_matches_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x4 = random(&[2, 4, 5, 5], &mut rng);
        let k = random(&[4, 2, 3, 3], &mut rng);
        let b4 = random(&[4], &mut rng);
        check(|t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), ConvGeom::new(2, 1, 2))?; project(t, y, seed) },
              &[x4.clone(), k, b4.clone()]);
        let kd = random(&[4, 1, 3, 3], &mut rng);
        check(|t, v| { let y = t.conv2d(v[0], v[1], None, ConvGeom::new(1, 1, 4))?; project(t, y, seed) },
              &[x4.clone(), kd]);
        check(|t, v| { let y = t.sigmoid(v[0]); project(t, y, seed) }, &[x4.clone()]);
        check(|t, v| { let y = t.softmax(v[0]); project(t, y, seed) }, &[x4.clone()]);
        let g = random(&[4], &mut rng);
        check(|t, v| { let y = t.layer_norm_axis(v[0], 1, v[1], v[2], 1e-6)?; project(t, y, seed) },
              &[x4.clone(), g.clone(), b4.clone()]);
        check(|t, v| {
            let mut st = BatchNormState::new(4);
            let y = t.batch_norm(v[0], v[1], v[2], &mut st, NormMode::Train)?;
            project(t, y, seed)
        }, &[x4.clone(), g.clone(), b4.clone()]);
        check(|t, v| {
            let mut st = BatchNormState::new(4);
            st.running_mean = vec![0.1, -0.2, 0.3, 0.0];
            st.running_var = vec![0.5, 1.5, 2.0, 1.0];
            let y = t.batch_norm(v[0], v[1], v[2], &mut st, NormMode::Eval)?;
            project(t, y, seed)
        }, &[x4.clone(), g, b4.clone()]);
        check(|t, v| { let y = t.global_avg_pool(v[0])?; project(t, y, seed) }, &[x4.clone()]);
        let gate = random(&[2, 4, 1, 1], &mut rng);
        check(|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, seed) }, &[x4.clone(), gate]);
        check(|t, v| { let y = t.sub(v[0], v[1])?; project(t, y, seed) }, &[x4.clone(), b4.clone().reshape(&[4, 1, 1]).unwrap()]);
        check(|t, v| { let y = t.permute(v[0], &[0, 2, 3, 1])?; project(t, y, seed) }, &[x4.clone()]);
        let a = random(&[2, 3, 4], &mut rng);
        let bm = random(&[2, 4, 5], &mut rng);
        check(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, seed) }, &[a.clone(), bm]);
        let w = random(&[3, 4], &mut rng);
        let cb = random(&[3], &mut rng);
        check(|t, v| { let y = t.class_dot(v[0], v[1], Some(v[2]))?; project(t, y, seed) }, &[random(&[2, 3, 4], &mut rng), w, cb]);
        let tok = random(&[3, 4], &mut rng);
        check(|t, v| { let y = t.expand(v[0], &[2, 3, 4])?; let s = t.sum_last(y); project(t, s, seed) }, &[tok]);
        let logits = random(&[3, 4], &mut rng);
        let target: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 0.85 } else { 0.05 }).collect();
        check(move |t, v| t.soft_target_cross_entropy(v[0], target.clone()), &[logits]);
    }

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let n = row.len();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[n], row.clone()).unwrap());
        let shifted = tape.constant(&Tensor::new(&[n], row.iter().map(|v| v + shift).collect()).unwrap());
        let a = tape.softmax(x);
        let b = tape.softmax(shifted);
        let total: f64 = tape.value(a).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (p, q) in tape.value(a).iter().zip(tape.value(b)) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes(row in prop::collection::vec(-50.0f64..50.0, 2..16)) {
        let mean0 = row.iter().sum::<f64>() / row.len() as f64;
        let var0 = row.iter().map(|v| (v - mean0).powi(2)).sum::<f64>() / row.len() as f64;
        prop_assume!(var0 > 1e-2);
        let n = row.len();
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[n], row).unwrap());
        let g = tape.constant(&Tensor::full(&[n], 1.0));
        let b = tape.constant(&Tensor::zeros(&[n]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        let v = tape.value(y);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-7);
        prop_assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = random(&[1, 2, 6, 6], &mut rng);
        let k = random(&[2, 1, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(&x), tape.constant(&k));
        let y = tape.conv2d(xv, kv, None, ConvGeom::new(1, 1, 2)).unwrap();
        let y = tape.gelu(y);
        let y = tape.softmax(y);
        tape.value(y).to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
}
