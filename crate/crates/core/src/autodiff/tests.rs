use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::grid::{laplacian_5pt, GridField};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Six nested loops, no im2col.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [f, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let xi = |b: usize, ch: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + i as usize) * w + j as usize]
        }
    };
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for o in 0..f {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let i = (oi * stride + ki) as isize - pad as isize;
                                let j = (oj * stride + kj) as isize - pad as isize;
                                acc += xi(b, ch, i, j) * k.data()[((o * c + ch) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * f + o) * ho + oi) * wo + oj] = acc;
                }
            }
        }
    }
    out
}

/// Max relative error between the tape gradient of `f` w.r.t. a single input
/// tensor and central differences, skipping entries `skip` flags.
fn input_grad_error(x: &Tensor, f: impl Fn(&mut Tape, Var) -> Var, skip: impl Fn(f64) -> bool) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(xv).unwrap().to_vec();
    let eval = |t: &Tensor| {
        let mut tape = Tape::new();
        let xv = tape.leaf(t.clone());
        let l = f(&mut tape, xv);
        tape.value(l).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in 0..x.numel() {
        if skip(x.data()[idx]) {
            continue;
        }
        let mut p = x.clone();
        p.data_mut()[idx] += h;
        let mut m = x.clone();
        m.data_mut()[idx] -= h;
        let numeric = (eval(&p) - eval(&m)) / (2.0 * h);
        worst = worst.max(rel_error(analytic[idx], numeric));
    }
    worst
}

/// Weighted sum so the upstream gradient is not uniform.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let w = random(tape.value(y).shape(), seed);
    let p = tape.mul_const(y, &w).unwrap();
    tape.sum(p)
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![0, 3], vec![]).is_err());
}

#[test]
fn conv_of_ones_sums() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).item(), 9.0);
}

#[test]
fn conv_identity_kernel_copies_input() {
    let input = random(&[2, 1, 5, 6], 1);
    let mut kernel = Tensor::zeros(&[1, 1, 3, 3]);
    kernel.data_mut()[4] = 1.0;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let k = tape.constant(kernel);
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(tape.value(y), &input);
}

#[test]
fn conv_matches_loop_oracle() {
    for (stride, pad, seed) in [(1, 0, 2), (1, 1, 3), (2, 1, 4), (2, 0, 5)] {
        let x = random(&[1, 2, 5, 5], seed);
        let k = random(&[3, 2, 3, 3], seed + 100);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(k.clone());
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        let expected = conv_oracle(&x, &k, stride, pad);
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
        }
    }
}

#[test]
fn conv_rejects_incompatible_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = tape.conv2d(x, k, 1, 0).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    let big = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
    assert!(tape.conv2d(x, big, 1, 1).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    let x = random(&[2, 2, 5, 5], 7);
    let k = random(&[3, 2, 3, 3], 8);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        let kk = k.clone();
        let err = input_grad_error(
            &x,
            |t, xv| {
                let kv = t.constant(kk.clone());
                let y = t.conv2d(xv, kv, stride, pad).unwrap();
                weighted_sum(t, y, 9)
            },
            |_| false,
        );
        assert!(err < 1e-4, "input grad err {err}");
        let xx = x.clone();
        let err = input_grad_error(
            &k,
            |t, kv| {
                let xv = t.constant(xx.clone());
                let y = t.conv2d(xv, kv, stride, pad).unwrap();
                weighted_sum(t, y, 9)
            },
            |_| false,
        );
        assert!(err < 1e-4, "kernel grad err {err}");
    }
}

#[test]
fn stencil_equals_grid_reference_exactly() {
    for seed in 0..10 {
        let x = random(&[3, 1, 7, 9], seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.stencil_laplacian(xv, 1.0).unwrap();
        for (b, plane) in tape.value(y).data().chunks(63).enumerate() {
            let field = GridField::new(7, 9, 1.0, x.data()[b * 63..(b + 1) * 63].to_vec()).unwrap();
            let reference = laplacian_5pt(&field).unwrap();
            assert!(plane
                .iter()
                .zip(reference.values())
                .all(|(a, r)| a.to_bits() == r.to_bits()));
        }
    }
}

#[test]
fn stencil_constant_is_zero_and_small_grids_rejected() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[1, 1, 4, 5], 2.5));
    let y = tape.stencil_laplacian(c, 1.0).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let small = tape.constant(Tensor::zeros(&[1, 1, 2, 5]));
    assert!(tape.stencil_laplacian(small, 1.0).is_err());
}

#[test]
fn stencil_gradient_matches_finite_differences() {
    let x = random(&[2, 1, 6, 5], 11);
    let plain = input_grad_error(
        &x,
        |t, xv| {
            let y = t.stencil_laplacian(xv, 1.0).unwrap();
            t.sum(y)
        },
        |_| false,
    );
    assert!(plain < 1e-4, "{plain}");
    let weighted = input_grad_error(
        &x,
        |t, xv| {
            let y = t.stencil_laplacian(xv, 0.7).unwrap();
            weighted_sum(t, y, 12)
        },
        |_| false,
    );
    assert!(weighted < 1e-4, "{weighted}");
}

#[test]
fn relu_values_and_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    // subgradient at zero is zero
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::new();
    let neg = tape.leaf(Tensor::full(&[4], -0.3));
    let y = tape.relu(neg);
    let s = tape.sum(y);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    assert!(tape.backward(s).unwrap().get(neg).unwrap().iter().all(|&g| g == 0.0));

    let err = input_grad_error(
        &random(&[40], 13),
        |t, xv| {
            let y = t.relu(xv);
            weighted_sum(t, y, 14)
        },
        |v| v.abs() < 1e-3,
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn softplus_values_and_derivative() {
    assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((softplus(50.0) - 50.0).abs() < 1e-15);
    assert!(softplus(-745.0) >= 0.0 && softplus(-30.0) > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        let v: f64 = rng.random_range(-8.0..8.0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(v));
        let y = tape.softplus(x);
        let g = tape.backward(y).unwrap().get(x).unwrap()[0];
        assert!((g - 1.0 / (1.0 + (-v).exp())).abs() < 1e-6);
    }
}

#[test]
fn sigmoid_values_and_gradients() {
    assert_eq!(sigmoid(0.0), 0.5);
    assert!((sigmoid(40.0) - 1.0).abs() < 1e-15);
    assert!(sigmoid(-40.0).abs() < 1e-15);
    assert!(!sigmoid(-1000.0).is_nan() && !sigmoid(1000.0).is_nan());
    let err = input_grad_error(
        &random(&[30], 16),
        |t, xv| {
            let y = t.sigmoid(xv);
            weighted_sum(t, y, 17)
        },
        |_| false,
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn global_avg_pool_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5]);

    let c = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.25));
    let y = tape.global_avg_pool(c).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.25));

    let x = random(&[2, 3, 3, 4], 18);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = tape.global_avg_pool(xv).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert!(g.get(xv).unwrap().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
    let err = input_grad_error(
        &x,
        |t, xv| {
            let y = t.global_avg_pool(xv).unwrap();
            weighted_sum(t, y, 19)
        },
        |_| false,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn dense_cases() {
    let x = random(&[3, 4], 20);
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(eye);
    let bv = tape.constant(Tensor::zeros(&[4]));
    let y = tape.dense(xv, wv, bv).unwrap();
    assert_eq!(tape.value(y), &x);

    let bias = Tensor::new(vec![2], vec![0.5, -1.5]).unwrap();
    let w0 = tape.constant(Tensor::zeros(&[2, 4]));
    let b = tape.constant(bias);
    let y = tape.dense(xv, w0, b).unwrap();
    for row in tape.value(y).data().chunks(2) {
        assert_eq!(row, &[0.5, -1.5]);
    }

    let w = random(&[5, 4], 21);
    let bias = random(&[5], 22);
    let wv = tape.constant(w.clone());
    let bv = tape.constant(bias.clone());
    let y = tape.dense(xv, wv, bv).unwrap();
    for r in 0..3 {
        for o in 0..5 {
            let mut e = bias.data()[o];
            for i in 0..4 {
                e += x.data()[r * 4 + i] * w.data()[o * 4 + i];
            }
            assert!((tape.value(y).data()[r * 5 + o] - e).abs() <= 1e-12);
        }
    }
    let bad = tape.constant(Tensor::zeros(&[5, 3]));
    assert!(tape.dense(xv, bad, bv).is_err());
}

#[test]
fn cross_entropy_cases() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros(&[3, 4]));
    let l = tape.softmax_cross_entropy(z, &[0, 1, 3]).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);

    let mut sat = Tensor::zeros(&[1, 3]);
    sat.data_mut()[2] = 1000.0;
    let z = tape.constant(sat);
    let l = tape.softmax_cross_entropy(z, &[2]).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);

    assert!(matches!(
        tape.softmax_cross_entropy(z, &[3]),
        Err(Error::Label { label: 3, classes: 3 })
    ));

    let logits = random(&[4, 5], 23).data().iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let logits = Tensor::new(vec![4, 5], logits).unwrap();
    let labels = [1, 4, 0, 2];
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let l = tape.softmax_cross_entropy(z, &labels).unwrap();
    let g = tape.backward(l).unwrap();
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * 5..(r + 1) * 5];
        let norm: f64 = row.iter().map(|v| v.exp()).sum();
        for k in 0..5 {
            let p = row[k].exp() / norm;
            let expected = (p - if k == label { 1.0 } else { 0.0 }) / 4.0;
            assert!((g.get(z).unwrap()[r * 5 + k] - expected).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_cases() {
    let p0 = random(&[6], 24);
    let mut params = ParameterSet::new();
    params.insert("p", p0.clone(), true);
    params.insert("q", random(&[2], 25), true);
    params.insert("frozen", random(&[2], 26), false);

    let mut tape = Tape::new();
    let b = params.bind(&mut tape);
    let p = b.get("p").unwrap();
    let sq = tape.square(p);
    let s = tape.sum(sq);
    let loss = tape.scale(s, 0.5);
    let grads = backward(&tape, loss, &params, &b).unwrap();
    assert_eq!(grads["p"].data(), p0.data());
    assert!(grads["q"].data().iter().all(|&v| v == 0.0));
    assert!(!grads.contains_key("frozen"));

    let vec_out = tape.scale(p, 2.0);
    assert!(matches!(tape.backward(vec_out), Err(Error::Shape(_))));
}

#[test]
fn grad_check_quadratic_and_softplus_chain() {
    let mut params = ParameterSet::new();
    params.insert("a", random(&[5], 27), true);
    let quad = grad_check(
        |t, b| {
            let a = b.get("a")?;
            let w = random(&[5], 28);
            let sq = t.square(a);
            let ws = t.mul_const(sq, &w)?;
            Ok(t.sum(ws))
        },
        &params,
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(quad.passed, "{quad:?}");

    let chain = grad_check(
        |t, b| {
            let a = b.get("a")?;
            let s1 = t.softplus(a);
            let s2 = t.softplus(s1);
            let sq = t.square(s2);
            Ok(t.mean(sq))
        },
        &params,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(chain.passed, "{chain:?}");
}

fn conv_pipeline_params() -> ParameterSet {
    let mut params = ParameterSet::new();
    params.insert("k", random(&[3, 1, 3, 3], 29), true);
    params.insert("kb", random(&[3], 30), true);
    params.insert("w", random(&[4, 3], 31), true);
    params.insert("b", random(&[4], 32), true);
    params
}

fn conv_pipeline(t: &mut Tape, b: &Bound) -> crate::Result<Var> {
    let x = t.constant(random(&[2, 1, 6, 6], 33));
    let y = t.conv2d(x, b.get("k")?, 1, 1)?;
    let y = t.bias_add(y, b.get("kb")?)?;
    let y = t.relu(y);
    let y = t.global_avg_pool(y)?;
    let y = t.dense(y, b.get("w")?, b.get("b")?)?;
    t.softmax_cross_entropy(y, &[1, 3])
}

#[test]
fn grad_check_conv_pipeline() {
    let report = grad_check(conv_pipeline, &conv_pipeline_params(), 1e-5, 1e-4).unwrap();
    assert!(report.passed, "{report:?}");
    assert_eq!(report.checked, 27 + 3 + 12 + 4);
}

#[test]
fn grad_check_tight_tolerance_hits_noise_floor() {
    let report = grad_check(conv_pipeline, &conv_pipeline_params(), 1e-5, 1e-8).unwrap();
    assert!(!report.passed, "{report:?}");
}

#[test]
fn binary_ops_broadcast_scalars() {
    let mut params = ParameterSet::new();
    params.insert("x", random(&[2, 3], 34), true);
    params.insert("s", Tensor::scalar(0.8), true);
    let report = grad_check(
        |t, b| {
            let x = b.get("x")?;
            let s = b.get("s")?;
            let a = t.mul(x, s)?;
            let c = t.div(a, s)?;
            let c = t.div(c, s)?;
            let d = t.sub(c, s)?;
            let e = t.add(d, x)?;
            let e = t.add_scalar(e, 0.3);
            let sq = t.square(e);
            Ok(t.mean(sq))
        },
        &params,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn checkpoint_rejects_garbage() {
    assert!(ParameterSet::from_bytes(&[1, 2, 3]).is_err());
    let mut bytes = 1000u64.to_le_bytes().to_vec();
    bytes.extend_from_slice(b"{}");
    assert!(ParameterSet::from_bytes(&bytes).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trips(seed in 0u64..10_000, n in 1usize..6) {
        let mut params = ParameterSet::new();
        params.insert("conv.weight", random(&[n, 2, 3, 3], seed), true);
        params.insert("phys.w_D", random(&[1], seed + 1), true);
        params.insert("stats", random(&[n], seed + 2), false);
        let bytes = params.to_bytes().unwrap();
        let back = ParameterSet::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, params);
    }

    #[test]
    fn softplus_and_sigmoid_ranges(x in -700.0f64..700.0) {
        prop_assert!(softplus(x) > 0.0 || x < -700.0);
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        if x.abs() < 30.0 {
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }

    #[test]
    fn cross_entropy_nonnegative(seed in 0u64..10_000) {
        let mut tape = Tape::new();
        let z = tape.constant(random(&[3, 4], seed));
        let l = tape.softmax_cross_entropy(z, &[0, 2, 3]).unwrap();
        prop_assert!(tape.value(l).item() >= 0.0);
    }

    #[test]
    fn gradients_are_linear_in_the_loss(seed in 0u64..10_000) {
        let mut params = ParameterSet::new();
        params.insert("x", random(&[2, 1, 4, 4], seed), true);
        let loss_a = |t: &mut Tape, b: &Bound| -> crate::Result<Var> {
            let l = t.stencil_laplacian(b.get("x")?, 1.0)?;
            let s = t.square(l);
            Ok(t.mean(s))
        };
        let loss_b = |t: &mut Tape, b: &Bound| -> crate::Result<Var> {
            let s = t.sigmoid(b.get("x")?);
            Ok(t.sum(s))
        };
        let grad_of = |f: &dyn Fn(&mut Tape, &Bound) -> crate::Result<Var>| {
            let mut t = Tape::new();
            let b = params.bind(&mut t);
            let l = f(&mut t, &b).unwrap();
            backward(&t, l, &params, &b).unwrap()["x"].clone()
        };
        let ga = grad_of(&loss_a);
        let gb = grad_of(&loss_b);
        let gsum = grad_of(&|t: &mut Tape, b: &Bound| {
            let a = loss_a(t, b)?;
            let c = loss_b(t, b)?;
            t.add(a, c)
        });
        for ((s, a), b) in gsum.data().iter().zip(ga.data()).zip(gb.data()) {
            prop_assert!((s - (a + b)).abs() <= 1e-12 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn forward_is_bit_deterministic(seed in 0u64..10_000) {
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(random(&[1, 2, 6, 6], seed));
            let k = t.constant(random(&[3, 2, 3, 3], seed + 5));
            let y = t.conv2d(x, k, 2, 1).unwrap();
            let y = t.softplus(y);
            t.value(y).clone()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
