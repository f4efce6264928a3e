//! Browser demo for the tumour growth simulator.
//!
//! Three operations back the page in `www/`: grow a tumour from a seed and
//! render it as a scan, highlight the edge band the boundary term acts on,
//! and measure how fast a front travels against the `2 sqrt(D rho)` speed.
//! The plain Rust API below is what the tests exercise; the `wasm` module
//! wraps it for JavaScript.

use physnet::grid::{detect_boundary, laplacian_5pt, GridField};
use physnet::sim::{
    front_speed_experiment, gaussian_blob, render_image, simulate, FrontSpeed, RenderConfig, SimParams,
};
use physnet::Result;

/// Side of the simulation grid, matching the generated corpora.
pub const GRID: usize = 128;
/// Grid spacing (mm).
pub const SPACING: f64 = 1.0;
/// Largest time step (days); smaller when the stability bound requires it.
pub const MAX_DT: f64 = 1.0;
/// Grid side of the front-speed runs.
pub const FRONT_GRID: usize = 192;

/// Settings of one growth run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthSettings {
    /// Diffusion coefficient (mm^2/day).
    pub d: f64,
    /// Proliferation rate (1/day).
    pub rho: f64,
    /// Carrying capacity.
    pub k: f64,
    /// Simulated time (days).
    pub days: f64,
    /// Width of the Gaussian seed (mm).
    pub seed_sigma: f64,
}

impl Default for GrowthSettings {
    fn default() -> Self {
        Self {
            d: 0.15,
            rho: 0.025,
            k: 1.0,
            days: 200.0,
            seed_sigma: 3.0,
        }
    }
}

/// A grown density field with the views the page draws.
#[derive(Debug, Clone)]
pub struct Growth {
    pub settings: GrowthSettings,
    pub field: GridField,
    pub steps: usize,
    pub dt: f64,
}

impl Growth {
    /// Seeds a centred Gaussian at half capacity and integrates it for
    /// `settings.days`.
    pub fn run(settings: GrowthSettings) -> Result<Self> {
        let GrowthSettings {
            d,
            rho,
            k,
            days,
            seed_sigma,
        } = settings;
        let stable = 0.2 * SPACING * SPACING / d.max(f64::MIN_POSITIVE);
        let steps = (days.max(0.0) / MAX_DT.min(stable)).ceil() as usize;
        let dt = if steps == 0 {
            MAX_DT.min(stable)
        } else {
            days / steps as f64
        };
        let centre = (GRID as f64 - 1.0) / 2.0;
        let initial = gaussian_blob(GRID, GRID, SPACING, (centre, centre), seed_sigma, 0.5 * k)?;
        let p = SimParams { d, rho, k, dt, steps };
        let traj = simulate(&initial, &p, steps.max(1))?;
        Ok(Self {
            settings,
            field: traj.last().field.clone(),
            steps,
            dt,
        })
    }

    /// Total tumour burden: the integral of the density (mm^2 at capacity 1).
    pub fn burden(&self) -> f64 {
        self.field.sum() * SPACING * SPACING
    }

    /// Area (mm^2) where the density exceeds half the carrying capacity.
    pub fn core_area(&self) -> f64 {
        let half = 0.5 * self.settings.k;
        self.field.values().iter().filter(|&&u| u > half).count() as f64 * SPACING * SPACING
    }

    /// The density rendered as a noisy scan, as RGBA bytes of a `GRID x GRID` image.
    pub fn scan_rgba(&self, noise_seed: u64) -> Vec<u8> {
        let cfg = RenderConfig {
            output_size: GRID,
            ..RenderConfig::default()
        };
        let img = render_image(&self.field, self.settings.k, noise_seed, &cfg);
        gray_to_rgba(&img.to_u8())
    }

    /// The density in grey with the boundary band (gradient magnitude above
    /// quantile `q`) coloured by the sign of the Laplacian: red where the
    /// front is concave (`lap u < 0`), blue where convex.
    pub fn boundary_rgba(&self, q: f64) -> Result<(Vec<u8>, usize)> {
        let mask = detect_boundary(&self.field, q)?;
        let lap = laplacian_5pt(&self.field)?;
        let k = self.settings.k;
        let mut out = Vec::with_capacity(GRID * GRID * 4);
        for ((&u, &on), &l) in self.field.values().iter().zip(&mask.mask).zip(lap.values()) {
            let g = (40.0 + 160.0 * (u / k).clamp(0.0, 1.0)) as u8;
            let px = match (on, l < 0.0) {
                (false, _) => [g, g, g, 255],
                (true, true) => [230, 60, 50, 255],
                (true, false) => [60, 120, 230, 255],
            };
            out.extend_from_slice(&px);
        }
        Ok((out, mask.count()))
    }
}

fn gray_to_rgba(gray: &[u8]) -> Vec<u8> {
    gray.iter().flat_map(|&v| [v, v, v, 255]).collect()
}

/// Measured speed of a travelling front against `2 sqrt(D rho)`.
pub fn front_speed(d: f64, rho: f64) -> Result<FrontSpeed> {
    front_speed_experiment(d, rho, FRONT_GRID)
}

#[cfg(target_arch = "wasm32")]
mod wasm {
    use wasm_bindgen::prelude::*;

    use super::{Growth, GrowthSettings, GRID};

    fn js(e: physnet::Error) -> JsError {
        JsError::new(&e.to_string())
    }

    /// A grown tumour held on the Rust side between redraws.
    #[wasm_bindgen]
    pub struct Tumour {
        inner: Growth,
    }

    #[wasm_bindgen]
    impl Tumour {
        #[wasm_bindgen(constructor)]
        pub fn new(d: f64, rho: f64, k: f64, days: f64) -> Result<Tumour, JsError> {
            let settings = GrowthSettings {
                d,
                rho,
                k,
                days,
                ..GrowthSettings::default()
            };
            Ok(Tumour {
                inner: Growth::run(settings).map_err(js)?,
            })
        }

        pub fn size() -> usize {
            GRID
        }

        pub fn steps(&self) -> usize {
            self.inner.steps
        }

        pub fn burden(&self) -> f64 {
            self.inner.burden()
        }

        #[wasm_bindgen(js_name = coreArea)]
        pub fn core_area(&self) -> f64 {
            self.inner.core_area()
        }

        pub fn scan(&self, noise_seed: u32) -> Vec<u8> {
            self.inner.scan_rgba(noise_seed as u64)
        }

        /// RGBA bytes of the boundary view; the band size is appended as the
        /// last four bytes (little-endian).
        pub fn boundary(&self, q: f64) -> Result<Vec<u8>, JsError> {
            let (mut rgba, count) = self.inner.boundary_rgba(q).map_err(js)?;
            rgba.extend_from_slice(&(count as u32).to_le_bytes());
            Ok(rgba)
        }
    }

    /// `[measured, predicted, relative error]` of the front speed.
    #[wasm_bindgen(js_name = frontSpeed)]
    pub fn front_speed(d: f64, rho: f64) -> Result<Vec<f64>, JsError> {
        let fs = super::front_speed(d, rho).map_err(js)?;
        Ok(vec![fs.measured, fs.predicted, fs.rel_error()])
    }
}
