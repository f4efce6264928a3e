//! The physics-embedded loss terms and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{detect_boundary, GridField};

fn same_shape(tape: &Tape, vars: &[(Var, &str)]) -> Result<()> {
    let first = tape.value(vars[0].0).shape();
    for &(v, name) in &vars[1..] {
        if tape.value(v).shape() != first {
            return Err(Error::Shape(format!(
                "{name} is {:?}, expected {first:?}",
                tape.value(v).shape()
            )));
        }
    }
    Ok(())
}

/// Fisher-KPP residual `dudt - (D lap(u) + rho u (1 - u/K))` on `[N,1,H,W]`
/// fields, with scalar `D`, `rho`, `K`.
pub fn residual(tape: &mut Tape, u: Var, dudt: Var, d: Var, rho: Var, k: Var, spacing: f64) -> Result<Var> {
    same_shape(tape, &[(u, "u"), (dudt, "dudt")])?;
    let lap = tape.stencil_laplacian(u, spacing)?;
    let diffusion = tape.mul(lap, d)?;
    let ratio = tape.div(u, k)?;
    let neg = tape.scale(ratio, -1.0);
    let headroom = tape.add_scalar(neg, 1.0);
    // (rho u)(1 - u/K): same association as the grid reference, so a
    // consistent pair gives a residual of exactly zero
    let scaled = tape.mul(u, rho)?;
    let growth = tape.mul(scaled, headroom)?;
    let rhs = tape.add(diffusion, growth)?;
    tape.sub(dudt, rhs)
}

/// Mean squared PDE residual over every grid point and batch element.
pub fn physics_loss(tape: &mut Tape, u: Var, dudt: Var, d: Var, rho: Var, k: Var, spacing: f64) -> Result<Var> {
    let r = residual(tape, u, dudt, d, rho, k, spacing)?;
    let sq = tape.square(r);
    Ok(tape.mean(sq))
}

/// 0/1 mask of high-gradient points for every `[H,W]` plane of `u`, and the
/// number of marked points. Computed on values, so it carries no gradient.
pub fn boundary_masks(u: &Tensor, quantile: f64, spacing: f64) -> Result<(Tensor, usize)> {
    let [_, _, h, w] = u.dims::<4>("boundary_masks")?;
    if u.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NanLoss {
            epoch: 0,
            batch: 0,
            loss: "boundary",
        });
    }
    let mut mask = Vec::with_capacity(u.numel());
    let mut count = 0;
    for plane in u.data().chunks(h * w) {
        let field = GridField::new(h, w, spacing, plane.to_vec())?;
        let m = detect_boundary(&field, quantile)?;
        count += m.count();
        mask.extend(m.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    Ok((Tensor::new(u.shape().to_vec(), mask)?, count))
}

/// Mean squared Laplacian over the boundary points of every sample; zero
/// when no point is marked.
pub fn boundary_loss(tape: &mut Tape, u: Var, quantile: f64, spacing: f64) -> Result<Var> {
    let (mask, count) = boundary_masks(tape.value(u), quantile, spacing)?;
    if count == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let lap = tape.stencil_laplacian(u, spacing)?;
    let sq = tape.square(lap);
    let masked = tape.mul_const(sq, &mask)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// First-order consistency between two pseudo-time observations:
/// mean of `(u2 - u1 - dt dudt1)^2`.
pub fn temporal_loss(tape: &mut Tape, u1: Var, dudt1: Var, u2: Var, dt: f64) -> Result<Var> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "pseudo-time step must be > 0, got {dt}"
        )));
    }
    same_shape(tape, &[(u1, "u1"), (dudt1, "dudt1"), (u2, "u2")])?;
    let diff = tape.sub(u2, u1)?;
    let step = tape.scale(dudt1, dt);
    let r = tape.sub(diff, step)?;
    let sq = tape.square(r);
    Ok(tape.mean(sq))
}

/// Weights of the three auxiliary terms for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_b: f64,
    pub lambda_t: f64,
}

/// Per-batch values of every term, the weights used and the total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_physics: f64,
    pub l_boundary: f64,
    pub l_temporal: f64,
    pub lambda_p: f64,
    pub lambda_b: f64,
    pub lambda_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `l_cls + lambda_p l_physics + lambda_b l_boundary + lambda_t l_temporal`,
    /// summed left to right exactly as the tape does.
    pub fn weighted_sum(&self) -> f64 {
        self.l_cls + self.lambda_p * self.l_physics + self.lambda_b * self.l_boundary + self.lambda_t * self.l_temporal
    }
}

/// Component losses of one batch; the physics terms are absent for the
/// classifier-only baseline.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cls: Var,
    pub physics: Option<Var>,
    pub boundary: Option<Var>,
    pub temporal: Option<Var>,
}

/// Weighted total on the tape plus its breakdown. Rejects non-finite terms,
/// naming the first offender.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    let val = |tape: &Tape, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let mut b = LossBreakdown {
        l_cls: val(tape, Some(terms.cls)),
        l_physics: val(tape, terms.physics),
        l_boundary: val(tape, terms.boundary),
        l_temporal: val(tape, terms.temporal),
        lambda_p: w.lambda_p,
        lambda_b: w.lambda_b,
        lambda_t: w.lambda_t,
        total: 0.0,
    };
    for (name, v) in [
        ("classification", b.l_cls),
        ("physics", b.l_physics),
        ("boundary", b.l_boundary),
        ("temporal", b.l_temporal),
    ] {
        if !v.is_finite() {
            return Err(Error::NanLoss {
                epoch: 0,
                batch: 0,
                loss: name,
            });
        }
    }
    let mut total = terms.cls;
    for (term, lambda) in [
        (terms.physics, w.lambda_p),
        (terms.boundary, w.lambda_b),
        (terms.temporal, w.lambda_t),
    ] {
        let weighted = match term {
            Some(t) => tape.scale(t, lambda),
            None => tape.constant(Tensor::scalar(0.0)),
        };
        total = tape.add(total, weighted)?;
    }
    b.total = tape.value(total).item();
    if !b.total.is_finite() {
        return Err(Error::NanLoss {
            epoch: 0,
            batch: 0,
            loss: "total",
        });
    }
    Ok((total, b))
}
