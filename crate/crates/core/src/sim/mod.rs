//! Forward Fisher-KPP solver and the synthetic corpus built on it.
//!
//! The solver is explicit forward-time, central-space (FTCS) on the
//! replicate-padded five-point stencil of [`crate::grid`]. Each step is
//! guarded by the 2D diffusion CFL bound `dt <= dx^2 / (4 D)`.

mod dataset;
mod render;

pub use dataset::{
    generate_dataset, generate_sample, load_field_pair, ClassProfile, Dataset, DatasetManifest, GenConfig,
    LoadedSample, Placement, SampleEntry, Split, SyntheticSample,
};
pub use render::{render_image, resample_area, GrayImage, RenderConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{laplacian_5pt, GridField};

/// Physical and numerical parameters of one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Diffusion coefficient (mm^2/day).
    pub d: f64,
    /// Proliferation rate (1/day). Zero gives pure diffusion.
    pub rho: f64,
    /// Carrying capacity.
    pub k: f64,
    /// Time step (days).
    pub dt: f64,
    pub steps: usize,
}

impl SimParams {
    pub fn cfl_limit(&self, spacing: f64) -> f64 {
        spacing * spacing / (4.0 * self.d)
    }

    pub fn validate(&self, spacing: f64) -> Result<()> {
        if !(self.d > 0.0 && self.k > 0.0 && self.dt > 0.0 && self.rho >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "need D, K, dt > 0 and rho >= 0, got {self:?}"
            )));
        }
        let limit = self.cfl_limit(spacing);
        if self.dt > limit {
            return Err(Error::Cfl { dt: self.dt, limit });
        }
        Ok(())
    }
}

/// One explicit step, clamped to `[0, K]`. Also returns the largest amount
/// any value had to be clamped by.
fn step_tracked(u: &GridField, p: &SimParams) -> Result<(GridField, f64)> {
    let lap = laplacian_5pt(u)?;
    let mut excess: f64 = 0.0;
    let next = u
        .values()
        .iter()
        .zip(lap.values())
        .map(|(&ui, &li)| {
            let raw = ui + p.dt * (p.d * li + p.rho * ui * (1.0 - ui / p.k));
            let clamped = raw.clamp(0.0, p.k);
            excess = excess.max((raw - clamped).abs());
            clamped
        })
        .collect();
    Ok((u.with_values(next), excess))
}

/// `u + dt * rhs(u)`, clamped to `[0, K]`; rejects steps that break the CFL bound.
pub fn step_ftcs(u: &GridField, p: &SimParams) -> Result<GridField> {
    p.validate(u.spacing())?;
    step_tracked(u, p).map(|(field, _)| field)
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub time: f64,
    pub field: GridField,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    /// Largest correction applied by the `[0, K]` clamp over the whole run.
    pub max_clamp_excess: f64,
}

impl Trajectory {
    pub fn last(&self) -> &Snapshot {
        self.snapshots
            .last()
            .expect("a trajectory always holds the initial field")
    }
}

/// Runs `p.steps` FTCS steps, keeping the initial field, every
/// `record_every`-th step and the final step.
pub fn simulate(initial: &GridField, p: &SimParams, record_every: usize) -> Result<Trajectory> {
    p.validate(initial.spacing())?;
    if initial.min() < 0.0 || initial.max() > p.k {
        return Err(Error::InvalidParameter(format!(
            "initial condition must lie in [0, K = {}], got [{}, {}]",
            p.k,
            initial.min(),
            initial.max()
        )));
    }
    let record_every = record_every.max(1);
    let mut snapshots = vec![Snapshot {
        time: 0.0,
        field: initial.clone(),
    }];
    let mut u = initial.clone();
    let mut max_clamp_excess: f64 = 0.0;
    for step in 1..=p.steps {
        let (next, excess) = step_tracked(&u, p)?;
        max_clamp_excess = max_clamp_excess.max(excess);
        u = next;
        if step % record_every == 0 || step == p.steps {
            snapshots.push(Snapshot {
                time: step as f64 * p.dt,
                field: u.clone(),
            });
        }
    }
    Ok(Trajectory {
        snapshots,
        max_clamp_excess,
    })
}

fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Smallest log-log growth exponent accepted as a travelling front.
const MIN_FRONT_EXPONENT: f64 = 0.75;

/// Speed of an expanding level set, from a linear fit of its equivalent
/// radius `sqrt(area / pi)` against time over the last half of the snapshots.
///
/// Growth that is not close to linear (pure diffusion spreads like `sqrt(t)`
/// and then fades) is reported as unmeasurable, as are fronts that touch the
/// grid edge or never form.
pub fn measure_front_speed(snapshots: &[Snapshot], level: f64) -> Result<f64> {
    if snapshots.len() < 3 {
        return Err(Error::Unmeasurable(format!(
            "need at least 3 snapshots, got {}",
            snapshots.len()
        )));
    }
    let window = &snapshots[snapshots.len() / 2..];
    if window.len() < 3 {
        return Err(Error::Unmeasurable("fewer than 3 snapshots in the fit window".into()));
    }
    let mut times = Vec::with_capacity(window.len());
    let mut radii = Vec::with_capacity(window.len());
    for snap in window {
        let f = &snap.field;
        let (h, w) = (f.height(), f.width());
        let mut count = 0usize;
        for i in 0..h {
            for j in 0..w {
                if f.get(i, j) > level {
                    count += 1;
                    if i == 0 || j == 0 || i == h - 1 || j == w - 1 {
                        return Err(Error::Unmeasurable(format!(
                            "front reached the grid edge at t = {}",
                            snap.time
                        )));
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::Unmeasurable(format!(
                "no point above level {level} at t = {}",
                snap.time
            )));
        }
        let area = count as f64 * f.spacing() * f.spacing();
        times.push(snap.time);
        radii.push((area / std::f64::consts::PI).sqrt());
    }
    if times[0] <= 0.0 {
        return Err(Error::Unmeasurable("fit window starts at t = 0".into()));
    }
    let log_t: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let log_r: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let (exponent, _) = linear_fit(&log_t, &log_r);
    if exponent < MIN_FRONT_EXPONENT {
        return Err(Error::Unmeasurable(format!(
            "radius grows like t^{exponent:.2}, not as a travelling front"
        )));
    }
    let (speed, _) = linear_fit(&times, &radii);
    Ok(speed)
}

/// Outcome of [`front_speed_experiment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontSpeed {
    pub measured: f64,
    /// Asymptotic travelling-wave speed `2 sqrt(D rho)`.
    pub predicted: f64,
    pub spacing: f64,
    pub steps: usize,
}

impl FrontSpeed {
    pub fn rel_error(&self) -> f64 {
        (self.measured - self.predicted).abs() / self.predicted
    }
}

/// Grows a wide Gaussian seed on an `n x n` grid and measures the speed of
/// its half-capacity level set.
///
/// Lengths are scaled by the front width `sqrt(D / rho)`: the spacing is half
/// of it and the seed width four times it, and the run stops once the front
/// has covered 90% of the half-width, so the discretisation and the
/// finite-time (logarithmic delay) bias are the same for every `(D, rho)`.
pub fn front_speed_experiment(d: f64, rho: f64, n: usize) -> Result<FrontSpeed> {
    if !(d > 0.0 && rho > 0.0 && d.is_finite() && rho.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "front speed needs D > 0 and rho > 0, got D = {d}, rho = {rho}"
        )));
    }
    let width = (d / rho).sqrt();
    let spacing = 0.5 * width;
    let predicted = 2.0 * (d * rho).sqrt();
    let centre = (n as f64 - 1.0) / 2.0;
    let t_end = 0.9 * (n as f64 * spacing / 2.0) / predicted;
    let dt = 0.2 * spacing * spacing / d;
    let steps = (t_end / dt).ceil() as usize;
    let initial = gaussian_blob(n, n, spacing, (centre, centre), 4.0 * width, 1.0)?;
    let p = SimParams {
        d,
        rho,
        k: 1.0,
        dt,
        steps,
    };
    let traj = simulate(&initial, &p, (steps / 40).max(1))?;
    let measured = measure_front_speed(&traj.snapshots, 0.5)?;
    Ok(FrontSpeed {
        measured,
        predicted,
        spacing,
        steps,
    })
}

/// Closed-form logistic solution for a spatially uniform field.
pub fn logistic_solution(u0: f64, rho: f64, k: f64, t: f64) -> f64 {
    let g = (rho * t).exp();
    k * u0 * g / (k + u0 * (g - 1.0))
}

/// Radially symmetric Gaussian bump centred at `(ci, cj)` (grid coordinates).
pub fn gaussian_blob(
    height: usize,
    width: usize,
    spacing: f64,
    center: (f64, f64),
    sigma: f64,
    amplitude: f64,
) -> Result<GridField> {
    GridField::from_fn(height, width, spacing, |i, j| {
        let di = (i as f64 - center.0) * spacing;
        let dj = (j as f64 - center.1) * spacing;
        amplitude * (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    })
}
