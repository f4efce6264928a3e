//! Self-checks of the numerics against closed forms, reference
//! implementations and finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Bound, GradCheckReport, ParameterSet, Tape, Tensor, Var};
use crate::error::Result;
use crate::grid::{fisher_kpp_rhs, laplacian_5pt, GridField};
use crate::model::{images_tensor, init_model, BackboneConfig, StageConfig};
use crate::sim::{front_speed_experiment, gaussian_blob, logistic_solution, simulate, GrayImage, SimParams};
use crate::train::{batch_objective, boundary_loss, physics_loss, temporal_loss, TrainConfig};

/// Result of one check: an observed error measure against its limit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub observed: f64,
    pub limit: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn at_most(name: impl Into<String>, observed: f64, limit: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            observed,
            limit,
            passed: observed <= limit,
            detail: detail.into(),
        }
    }

    fn from_report(name: &str, r: &GradCheckReport) -> Self {
        let detail = match &r.worst {
            Some((p, i)) => format!(
                "{} entries; worst {p}[{i}]: analytic {:.6e}, numeric {:.6e}",
                r.checked, r.analytic_at_worst, r.numeric_at_worst
            ),
            None => "no trainable entries".to_string(),
        };
        Self::at_most(name, r.max_rel_error, r.tol, detail)
    }
}

/// Tolerances and sizes of the full battery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Relative-error tolerance of the per-operation gradient checks.
    pub op_grad_tol: f64,
    /// Relative-error tolerance of the whole-objective gradient check.
    pub loss_grad_tol: f64,
    /// Central-difference step.
    pub fd_step: f64,
    pub logistic_tol: f64,
    pub mass_tol: f64,
    pub front_grid: usize,
    pub front_tol: f64,
    pub stencil_fields: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            op_grad_tol: 1e-4,
            loss_grad_tol: 1e-3,
            fd_step: 1e-5,
            logistic_tol: 1e-3,
            mass_tol: 1e-6,
            front_grid: 256,
            front_tol: 0.1,
            stencil_fields: 100,
            seed: 0,
        }
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random values with magnitude at least 0.1, away from the kink of relu.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let t = random(shape, seed);
    Tensor::from_fn(shape, |i| {
        let v = t.data()[i];
        v.signum() * (0.1 + 0.9 * v.abs())
    })
}

/// `sum(w * y)` for a fixed random `w`, so every output entry carries a
/// distinct sensitivity.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = random(t.value(y).shape(), seed);
    let wy = t.mul_const(y, &w)?;
    Ok(t.sum(wy))
}

fn one_param(name: &str, value: Tensor) -> ParameterSet {
    let mut p = ParameterSet::new();
    p.insert(name, value, true);
    p
}

type OpCase = (
    &'static str,
    ParameterSet,
    Box<dyn Fn(&mut Tape, &Bound) -> Result<Var>>,
);

fn op_cases() -> Vec<OpCase> {
    let mut conv = ParameterSet::new();
    conv.insert("x", random(&[2, 2, 6, 5], 1), true);
    conv.insert("k", random(&[3, 2, 3, 3], 2), true);
    let mut pipeline = ParameterSet::new();
    pipeline.insert("k", random(&[3, 1, 3, 3], 29), true);
    pipeline.insert("kb", random(&[3], 30), true);
    pipeline.insert("w", random(&[4, 3], 31), true);
    pipeline.insert("b", random(&[4], 32), true);
    let mut dense = ParameterSet::new();
    dense.insert("x", random(&[3, 4], 5), true);
    dense.insert("w", random(&[2, 4], 6), true);
    dense.insert("b", random(&[2], 7), true);
    let mut bias = ParameterSet::new();
    bias.insert("x", random(&[2, 3, 4, 4], 8), true);
    bias.insert("b", random(&[3], 9), true);
    let mut arith = ParameterSet::new();
    arith.insert("x", random(&[2, 3], 10), true);
    arith.insert("y", away_from_zero(&[2, 3], 11), true);
    arith.insert("s", Tensor::scalar(0.8), true);

    vec![
        (
            "conv2d stride 1",
            conv.clone(),
            Box::new(|t, b| {
                let y = t.conv2d(b.get("x")?, b.get("k")?, 1, 1)?;
                let y = t.square(y);
                weighted_sum(t, y, 3)
            }),
        ),
        (
            "conv2d stride 2",
            conv,
            Box::new(|t, b| {
                let y = t.conv2d(b.get("x")?, b.get("k")?, 2, 1)?;
                let y = t.square(y);
                weighted_sum(t, y, 4)
            }),
        ),
        (
            "conv2d pipeline",
            pipeline,
            Box::new(|t, b| {
                let x = t.constant(random(&[2, 1, 6, 6], 33));
                let y = t.conv2d(x, b.get("k")?, 1, 1)?;
                let y = t.bias_add(y, b.get("kb")?)?;
                let y = t.relu(y);
                let y = t.global_avg_pool(y)?;
                let y = t.dense(y, b.get("w")?, b.get("b")?)?;
                t.softmax_cross_entropy(y, &[1, 3])
            }),
        ),
        (
            "bias_add",
            bias,
            Box::new(|t, b| {
                let y = t.bias_add(b.get("x")?, b.get("b")?)?;
                let y = t.square(y);
                weighted_sum(t, y, 12)
            }),
        ),
        (
            "relu",
            one_param("x", away_from_zero(&[3, 5], 13)),
            Box::new(|t, b| {
                let y = t.relu(b.get("x")?);
                weighted_sum(t, y, 14)
            }),
        ),
        (
            "softplus",
            one_param("x", random(&[3, 5], 15)),
            Box::new(|t, b| {
                let y = t.softplus(b.get("x")?);
                weighted_sum(t, y, 16)
            }),
        ),
        (
            "sigmoid",
            one_param("x", random(&[3, 5], 17)),
            Box::new(|t, b| {
                let y = t.sigmoid(b.get("x")?);
                weighted_sum(t, y, 18)
            }),
        ),
        (
            "global_avg_pool",
            one_param("x", random(&[2, 3, 4, 5], 19)),
            Box::new(|t, b| {
                let y = t.global_avg_pool(b.get("x")?)?;
                let y = t.square(y);
                weighted_sum(t, y, 20)
            }),
        ),
        (
            "dense",
            dense,
            Box::new(|t, b| {
                let y = t.dense(b.get("x")?, b.get("w")?, b.get("b")?)?;
                let y = t.square(y);
                weighted_sum(t, y, 21)
            }),
        ),
        (
            "softmax_cross_entropy",
            one_param("z", random(&[3, 4], 22)),
            Box::new(|t, b| t.softmax_cross_entropy(b.get("z")?, &[0, 3, 1])),
        ),
        (
            "stencil_laplacian",
            one_param("x", random(&[2, 1, 6, 5], 23)),
            Box::new(|t, b| {
                let y = t.stencil_laplacian(b.get("x")?, 0.7)?;
                let y = t.square(y);
                weighted_sum(t, y, 24)
            }),
        ),
        (
            "elementwise arithmetic",
            arith,
            Box::new(|t, b| {
                let (x, y, s) = (b.get("x")?, b.get("y")?, b.get("s")?);
                let a = t.mul(x, s)?;
                let a = t.div(a, y)?;
                let c = t.sub(a, s)?;
                let c = t.add(c, x)?;
                let c = t.mul(c, y)?;
                let c = t.add_scalar(c, 0.3);
                let c = t.scale(c, 1.7);
                let sq = t.square(c);
                Ok(t.mean(sq))
            }),
        ),
    ]
}

/// Gradient check of every differentiable operation in isolation.
pub fn op_gradient_checks(tol: f64, step: f64) -> Result<Vec<CheckOutcome>> {
    op_cases()
        .into_iter()
        .map(|(name, params, f)| {
            let report = grad_check(|t, b| f(t, b), &params, step, tol)?;
            Ok(CheckOutcome::from_report(&format!("grad {name}"), &report))
        })
        .collect()
}

/// A model small enough that every parameter can be probed by finite differences.
pub fn tiny_train_config() -> TrainConfig {
    let st = |channels, stride| StageConfig { channels, stride };
    TrainConfig {
        model: BackboneConfig {
            input_size: 16,
            stages: vec![st(3, 2), st(4, 1), st(4, 2)],
            tap_stage: 2,
            head_hidden: 3,
            tap_spacing: 1.0,
        },
        lambda_b: 0.1,
        lambda_t: 0.1,
        ..TrainConfig::default()
    }
}

/// Gradient check of the whole training objective (classification, physics,
/// boundary and temporal terms) on a two-sample batch with two views.
pub fn full_loss_gradient_check(tol: f64, step: f64, seed: u64) -> Result<GradCheckReport> {
    let cfg = tiny_train_config();
    let n = cfg.model.input_size;
    let params = init_model(&cfg.model, 3, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut image = || GrayImage {
        size: n,
        pixels: (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let (a, b, c, d) = (image(), image(), image(), image());
    let view1 = images_tensor(&[&a, &b])?;
    let view2 = images_tensor(&[&c, &d])?;
    grad_check(
        |tape, bound| {
            let (total, _, _) =
                batch_objective(tape, bound, &cfg, view1.clone(), Some(view2.clone()), &[0, 2], |_| 0.05)?;
            Ok(total)
        },
        &params,
        step,
        tol,
    )
}

/// Compares the differentiable stencil with `reference` bit for bit on random
/// fields of random shape and spacing; `observed` counts mismatching fields.
pub fn stencil_equivalence_with(
    n_fields: usize,
    seed: u64,
    reference: impl Fn(&GridField) -> Result<GridField>,
) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatched = 0usize;
    for _ in 0..n_fields {
        let (h, w) = (rng.random_range(3..24), rng.random_range(3..24));
        let spacing = rng.random_range(0.25..2.0);
        let values: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let field = GridField::new(h, w, spacing, values.clone())?;
        let expected = reference(&field)?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1, h, w], values)?);
        let y = tape.stencil_laplacian(x, spacing)?;
        let same = tape
            .value(y)
            .data()
            .iter()
            .zip(expected.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatched += 1;
        }
    }
    Ok(CheckOutcome::at_most(
        "stencil equivalence",
        mismatched as f64,
        0.0,
        format!("{mismatched} of {n_fields} random fields differ from the grid reference"),
    ))
}

pub fn stencil_equivalence(n_fields: usize, seed: u64) -> Result<CheckOutcome> {
    stencil_equivalence_with(n_fields, seed, laplacian_5pt)
}

/// Uniform fields follow the logistic ODE exactly; compares the simulator
/// at `dt = 1e-3` with the closed form for two parameter sets.
pub fn logistic_oracle(tol: f64) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    for (u0, rho, k, t_end) in [(0.1, 1.0, 1.0, 9f64.ln()), (0.3, 0.5, 1.5, 4.0)] {
        let steps = (t_end / 1e-3_f64).round() as usize;
        let dt = t_end / steps as f64;
        let field = GridField::constant(4, 4, 1.0, u0)?;
        let p = SimParams {
            d: 0.7,
            rho,
            k,
            dt,
            steps,
        };
        let end = simulate(&field, &p, steps)?;
        let exact = logistic_solution(u0, rho, k, t_end);
        for &v in end.last().field.values() {
            worst = worst.max((v - exact).abs());
        }
    }
    Ok(CheckOutcome::at_most(
        "logistic closed form",
        worst,
        tol,
        "max |u - u_exact| for uniform fields at dt = 1e-3",
    ))
}

/// Pure diffusion with no-flux edges keeps total mass over 1000 steps.
pub fn mass_conservation_oracle(tol: f64) -> Result<CheckOutcome> {
    let u = gaussian_blob(48, 48, 1.0, (20.0, 26.0), 3.0, 0.9)?;
    let p = SimParams {
        d: 1.0,
        rho: 0.0,
        k: 1.0,
        dt: 0.2,
        steps: 1000,
    };
    let traj = simulate(&u, &p, 1000)?;
    let (m0, m1) = (u.sum(), traj.last().field.sum());
    Ok(CheckOutcome::at_most(
        "diffusion mass conservation",
        ((m1 - m0) / m0).abs(),
        tol,
        format!("mass {m0:.12} -> {m1:.12} over 1000 steps"),
    ))
}

/// Measured front speed against `2 sqrt(D rho)`.
pub fn front_speed_oracle(d: f64, rho: f64, n: usize, tol: f64) -> Result<CheckOutcome> {
    let fs = front_speed_experiment(d, rho, n)?;
    Ok(CheckOutcome::at_most(
        format!("front speed D={d} rho={rho}"),
        fs.rel_error(),
        tol,
        format!(
            "measured {:.5}, predicted {:.5} on {n}x{n} ({} steps)",
            fs.measured, fs.predicted, fs.steps
        ),
    ))
}

/// The auxiliary losses vanish exactly on analytically consistent inputs.
pub fn loss_zero_cases(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let plane = |h: usize, v: Vec<f64>| Tensor::new(vec![1, 1, h, h], v);

    // physics: dudt computed from u by the reference right-hand side
    let (d, rho, k) = (0.3, 0.7, 1.2);
    let u = GridField::from_fn(8, 8, 1.0, |_, _| rng.random_range(0.0..1.0))?;
    let dudt = fisher_kpp_rhs(&u, d, rho, k)?;
    let mut tape = Tape::new();
    let uv = tape.constant(plane(8, u.values().to_vec())?);
    let tv = tape.constant(plane(8, dudt.values().to_vec())?);
    let [dv, rv, kv] = [d, rho, k].map(|v| tape.constant(Tensor::scalar(v)));
    let l = physics_loss(&mut tape, uv, tv, dv, rv, kv, 1.0)?;
    out.push(CheckOutcome::at_most(
        "physics loss on a consistent pair",
        tape.value(l).item(),
        0.0,
        "dudt = D lap(u) + rho u (1 - u/K)",
    ));

    // boundary: a flat field and a linear ramp (zero curvature on its edge band)
    let flat = tape.constant(Tensor::full(&[2, 1, 6, 6], 0.4));
    let lf = boundary_loss(&mut tape, flat, 0.8, 1.0)?;
    let ramp = plane(
        9,
        (0..81)
            .map(|i| match i % 9 {
                j @ 3..=5 => (j as f64 - 3.0) * 0.5,
                j if j < 3 => 0.0,
                _ => 1.0,
            })
            .collect(),
    )?;
    let rv = tape.constant(ramp);
    let lr = boundary_loss(&mut tape, rv, 0.75, 1.0)?;
    let worst = tape.value(lf).item().max(tape.value(lr).item());
    out.push(CheckOutcome::at_most(
        "boundary loss on flat and linear fields",
        worst,
        0.0,
        "constant field, and a ramp whose steep band is straight",
    ));

    // temporal: u2 = u1 + dt * dudt1 in exactly representable values
    let dt = 0.5;
    let u1: Vec<f64> = (0..16).map(|_| rng.random_range(0..64) as f64 / 64.0).collect();
    let rate: Vec<f64> = (0..16).map(|_| rng.random_range(-64..64) as f64 / 64.0).collect();
    let u2: Vec<f64> = u1.iter().zip(&rate).map(|(a, r)| a + dt * r).collect();
    let [a, r, b] = [u1, rate, u2].map(|v| plane(4, v).map(|t| tape.constant(t)));
    let l = temporal_loss(&mut tape, a?, r?, b?, dt)?;
    out.push(CheckOutcome::at_most(
        "temporal loss on a consistent pair",
        tape.value(l).item(),
        0.0,
        "u2 = u1 + dt dudt1",
    ));
    Ok(out)
}

/// Every check in a fixed order.
pub fn run_all(cfg: &OracleConfig) -> Result<Vec<CheckOutcome>> {
    let mut out = op_gradient_checks(cfg.op_grad_tol, cfg.fd_step)?;
    let report = full_loss_gradient_check(cfg.loss_grad_tol, cfg.fd_step, cfg.seed)?;
    out.push(CheckOutcome::from_report("grad full training objective", &report));
    out.push(stencil_equivalence(cfg.stencil_fields, cfg.seed)?);
    out.push(logistic_oracle(cfg.logistic_tol)?);
    out.push(mass_conservation_oracle(cfg.mass_tol)?);
    for (d, rho) in [(1.0, 1.0), (0.25, 1.0)] {
        out.push(front_speed_oracle(d, rho, cfg.front_grid, cfg.front_tol)?);
    }
    out.extend(loss_zero_cases(cfg.seed)?);
    Ok(out)
}
