//! Adaptive physics-loss weighting and the learning-rate schedule.

use serde::{Deserialize, Serialize};

/// Exponential moving average of the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaTracker {
    ema: Option<f64>,
    decay: f64,
}

impl EmaTracker {
    pub fn new(decay: f64) -> Self {
        assert!(
            (0.0..1.0).contains(&decay) && decay > 0.0,
            "EMA decay must lie in (0, 1)"
        );
        Self { ema: None, decay }
    }

    /// Current average; `None` before the first observation.
    pub fn value(&self) -> Option<f64> {
        self.ema
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// `ema' = decay ema + (1 - decay) v`; the first observation initialises it.
    pub fn update(&mut self, v: f64) -> f64 {
        let next = match self.ema {
            None => v,
            Some(e) => self.decay * e + (1.0 - self.decay) * v,
        };
        self.ema = Some(next);
        next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// `min(lambda_max, lambda0 exp(alpha (EMA / (l + eps) - 1)))`: grows as the
    /// classification loss falls below its long-run average.
    Adaptive,
    /// `lambda0 exp(-alpha l / EMA)`, the update rule as printed. Never exceeds
    /// `lambda0`.
    Literal,
    /// Constant `lambda0`.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaConfig {
    pub mode: LambdaMode,
    pub lambda0: f64,
    pub alpha: f64,
    pub lambda_max: f64,
    pub eps: f64,
    /// Decay of a short-memory average of the batch classification loss that
    /// stands in for the "current" loss; 0 uses the raw batch loss.
    pub smoothing: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        Self {
            mode: LambdaMode::Adaptive,
            lambda0: 0.01,
            alpha: 0.5,
            lambda_max: 0.1,
            eps: 1e-8,
            smoothing: 0.98,
        }
    }
}

/// Physics weight for the current classification loss given an initialised tracker.
pub fn adaptive_lambda(tracker: &EmaTracker, l_cls_now: f64, cfg: &LambdaConfig) -> f64 {
    let ema = tracker.value().unwrap_or(l_cls_now);
    match cfg.mode {
        LambdaMode::Fixed => cfg.lambda0,
        LambdaMode::Literal => cfg.lambda0 * (-cfg.alpha * l_cls_now / ema).exp(),
        LambdaMode::Adaptive => {
            let ratio = ema / (l_cls_now + cfg.eps);
            cfg.lambda_max.min(cfg.lambda0 * (cfg.alpha * (ratio - 1.0)).exp())
        }
    }
}

/// Per-iteration driver: the weight compares the long-run average of the
/// losses seen before this iteration with a short-memory average that already
/// includes it, then the long-run average absorbs the current loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaScheduler {
    cfg: LambdaConfig,
    tracker: EmaTracker,
    recent: Option<f64>,
    current: f64,
}

impl LambdaScheduler {
    pub fn new(cfg: LambdaConfig, ema_decay: f64) -> Self {
        Self {
            cfg,
            tracker: EmaTracker::new(ema_decay),
            recent: None,
            current: cfg.lambda0,
        }
    }

    pub fn next(&mut self, l_cls: f64) -> f64 {
        if self.tracker.value().is_none() {
            self.tracker.update(l_cls);
        }
        let a = self.cfg.smoothing;
        let recent = match self.recent {
            None => l_cls,
            Some(r) => a * r + (1.0 - a) * l_cls,
        };
        self.recent = Some(recent);
        self.current = adaptive_lambda(&self.tracker, recent, &self.cfg);
        self.tracker.update(l_cls);
        self.current
    }

    /// The most recent weight (`lambda0` before the first iteration).
    pub fn current(&self) -> f64 {
        self.current
    }

    pub fn tracker(&self) -> &EmaTracker {
        &self.tracker
    }
}

/// Cosine annealing from `eta0` at epoch 0 to `eta0 / 100` at `total_epochs`.
pub fn cosine_lr(epoch: usize, eta0: f64, total_epochs: usize) -> f64 {
    let eta_min = eta0 / 100.0;
    if total_epochs == 0 {
        return eta0;
    }
    let frac = epoch.min(total_epochs) as f64 / total_epochs as f64;
    eta_min + (eta0 - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}
