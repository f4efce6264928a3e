//! Held-out metrics and the per-class physical-parameter protocol.

use serde::{Deserialize, Serialize};

use super::loss::physics_loss;
use super::optim::{adamw_step, AdamWConfig, AdamWState};
use super::schedule::cosine_lr;
use crate::autodiff::{backward, softplus, Bound, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{laplacian_5pt, pde_residual, GridField};
use crate::model::{images_tensor, predict, ModelSpec, W_D, W_K, W_RHO};
use crate::sim::LoadedSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_f1: Vec<Option<f64>>,
}

/// Accuracy, macro-F1 and the confusion matrix. Macro-F1 averages over the
/// classes that occur in either the labels or the predictions.
pub fn classification_metrics(
    predicted: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<ClassificationMetrics> {
    if predicted.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    if let Some(&label) = predicted.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::Label {
            label,
            classes: n_classes,
        });
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let per_class_f1: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
            if support == 0 && predicted_c == 0 {
                return None;
            }
            let denom = (support + predicted_c) as f64;
            Some(2.0 * tp / denom)
        })
        .collect();
    let present: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: present.iter().sum::<f64>() / present.len() as f64,
        confusion,
        per_class_f1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    pub class_names: Vec<String>,
    pub classification: ClassificationMetrics,
    /// Mean and population standard deviation of `|R(x)|` over every tap
    /// point of every sample.
    pub residual_mean: f64,
    pub residual_sd: f64,
    /// Mean squared error between the predicted density and the simulator's
    /// field; absent when the grids differ in size.
    pub u_mse: Option<f64>,
    pub d: f64,
    pub rho: f64,
    pub k: f64,
}

/// Evaluates `params` on `samples`. The residual is computed on the
/// reference grid path, not the tape.
pub fn evaluate(
    params: &ParameterSet,
    spec: &ModelSpec,
    samples: &[&LoadedSample],
    batch: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let cfg = &spec.backbone;
    let tap = cfg.tap_size();
    let mut predicted = Vec::with_capacity(samples.len());
    let mut abs_res = Vec::with_capacity(samples.len() * tap * tap);
    let (mut se, mut se_n, mut mse_ok) = (0.0, 0usize, true);
    let mut phys = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(batch.max(1)) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let pred = predict(params, cfg, images_tensor(&imgs)?)?;
        phys = (pred.d, pred.rho, pred.k);
        predicted.extend(pred.classes());
        let plane = tap * tap;
        for (b, s) in chunk.iter().enumerate() {
            let slice = |t: &Tensor| t.data()[b * plane..(b + 1) * plane].to_vec();
            let u = GridField::new(tap, tap, cfg.tap_spacing, slice(&pred.u))?;
            let dudt = GridField::new(tap, tap, cfg.tap_spacing, slice(&pred.dudt))?;
            let r = pde_residual(&u, &dudt, pred.d, pred.rho, pred.k)?;
            abs_res.extend(r.values().iter().map(|v| v.abs()));
            if s.u_true.height() == tap && s.u_true.width() == tap {
                se += u
                    .values()
                    .iter()
                    .zip(s.u_true.values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                se_n += plane;
            } else {
                mse_ok = false;
            }
        }
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.entry.label).collect();
    let n = abs_res.len() as f64;
    let mean = abs_res.iter().sum::<f64>() / n;
    let var = abs_res.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(MetricsReport {
        n_samples: samples.len(),
        class_names: spec.class_names.clone(),
        classification: classification_metrics(&predicted, &labels, spec.n_classes)?,
        residual_mean: mean,
        residual_sd: var.sqrt(),
        u_mse: (mse_ok && se_n > 0).then(|| se / se_n as f64),
        d: phys.0,
        rho: phys.1,
        k: phys.2,
    })
}

/// Settings of the per-class fine-tune of the three physical scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 300, lr: 0.01 }
    }
}

/// Two observed density snapshots, `gap` time units apart.
#[derive(Debug, Clone, Copy)]
pub struct ObservedPair<'a> {
    pub earlier: &'a GridField,
    pub later: &'a GridField,
    pub gap: f64,
}

impl<'a> ObservedPair<'a> {
    pub fn from_sample(s: &'a LoadedSample) -> Self {
        Self {
            earlier: &s.u_true,
            later: &s.u_next,
            gap: s.observed_gap,
        }
    }

    fn is_empty(&self) -> bool {
        self.earlier.max() <= 0.0 && self.later.max() <= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalFit {
    pub d: f64,
    pub rho: f64,
    pub k: f64,
    /// Mean squared residual at the fitted values.
    pub loss: f64,
    /// False when every observed field is zero: the parameters cannot be
    /// inferred and the starting values are returned unchanged.
    pub identifiable: bool,
}

/// Fits `softplus(w)` for D, rho and K to observed pairs by minimising the
/// mean squared residual with the midpoint density `(u + u')/2` and the
/// finite-difference rate `(u' - u)/gap`.
///
/// The residual is linear in `(D, rho, rho/K)`, so the closed-form least
/// squares solution is used as the starting point whenever it is positive;
/// otherwise the fit starts from the raw weights in `start` (normally a
/// trained model's). AdamW then refines the softplus weights, and the
/// lowest-loss iterate is kept.
pub fn finetune_physical(
    start: &ParameterSet,
    pairs: &[ObservedPair<'_>],
    cfg: &FinetuneConfig,
) -> Result<PhysicalFit> {
    let mut params = ParameterSet::new();
    for name in [W_D, W_RHO, W_K] {
        params.insert(name, start.get(name)?.clone(), true);
    }
    let exposed = |p: &ParameterSet| -> Result<(f64, f64, f64)> {
        Ok((
            softplus(p.get(W_D)?.item()),
            softplus(p.get(W_RHO)?.item()),
            softplus(p.get(W_K)?.item()),
        ))
    };
    let informative: Vec<&ObservedPair<'_>> = pairs.iter().filter(|p| !p.is_empty()).collect();
    if informative.is_empty() {
        let (d, rho, k) = exposed(&params)?;
        return Ok(PhysicalFit {
            d,
            rho,
            k,
            loss: 0.0,
            identifiable: false,
        });
    }
    let first = informative[0].earlier;
    let (h, w, spacing) = (first.height(), first.width(), first.spacing());
    let mut mid = Vec::with_capacity(informative.len() * h * w);
    let mut rate = Vec::with_capacity(informative.len() * h * w);
    for p in &informative {
        if !p.earlier.same_layout(first) || !p.later.same_layout(first) || !(p.gap > 0.0) {
            return Err(Error::Shape(
                "observed pairs must share one grid layout and have gap > 0".into(),
            ));
        }
        for (a, b) in p.earlier.values().iter().zip(p.later.values()) {
            mid.push(0.5 * (a + b));
            rate.push((b - a) / p.gap);
        }
    }
    if let Some((d, rho, k)) = least_squares_start(&mid, &rate, h, w, spacing)? {
        let inv = |v: f64| (v.exp_m1()).ln();
        *params.get_mut(W_D)? = Tensor::scalar(inv(d));
        *params.get_mut(W_RHO)? = Tensor::scalar(inv(rho));
        *params.get_mut(W_K)? = Tensor::scalar(inv(k));
    }
    let shape = vec![informative.len(), 1, h, w];
    let mid = Tensor::new(shape.clone(), mid)?;
    let rate = Tensor::new(shape, rate)?;
    let objective = |tape: &mut Tape, params: &ParameterSet| -> Result<(Var, Bound)> {
        let bound = params.bind(tape);
        let (wd, wr, wk) = (bound.get(W_D)?, bound.get(W_RHO)?, bound.get(W_K)?);
        let (d, rho, k) = (tape.softplus(wd), tape.softplus(wr), tape.softplus(wk));
        let u = tape.constant(mid.clone());
        let dudt = tape.constant(rate.clone());
        Ok((physics_loss(tape, u, dudt, d, rho, k, spacing)?, bound))
    };
    let mut state = AdamWState::new();
    let adam = AdamWConfig::default();
    let mut best: Option<(f64, ParameterSet)> = None;
    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let (loss, bound) = objective(&mut tape, &params)?;
        let value = tape.value(loss).item();
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, params.clone()));
        }
        if step == cfg.steps {
            break;
        }
        let grads = backward(&tape, loss, &params, &bound)?;
        adamw_step(
            &mut params,
            &grads,
            &mut state,
            cosine_lr(step, cfg.lr, cfg.steps),
            0.0,
            &adam,
        )?;
    }
    let (loss, params) = best.expect("at least one evaluation");
    let (d, rho, k) = exposed(&params)?;
    Ok(PhysicalFit {
        d,
        rho,
        k,
        loss,
        identifiable: true,
    })
}

/// Unconstrained least-squares solution of `rate = D lap(u) + rho u - (rho/K) u^2`,
/// which is linear in `(D, rho, rho/K)`. Returns `None` unless all three come
/// out positive.
fn least_squares_start(mid: &[f64], rate: &[f64], h: usize, w: usize, spacing: f64) -> Result<Option<(f64, f64, f64)>> {
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for (plane, target) in mid.chunks(h * w).zip(rate.chunks(h * w)) {
        let u = GridField::new(h, w, spacing, plane.to_vec())?;
        let lap = laplacian_5pt(&u)?;
        for ((&l, &ui), &y) in lap.values().iter().zip(plane).zip(target) {
            let a = [l, ui, -ui * ui];
            for r in 0..3 {
                for c in 0..3 {
                    ata[r][c] += a[r] * a[c];
                }
                atb[r] += a[r] * y;
            }
        }
    }
    let det3 = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let det = det3(&ata);
    let scale = ata[0][0] * ata[1][1] * ata[2][2];
    if !(det.abs() > 1e-14 * scale) {
        return Ok(None);
    }
    // Cramer's rule
    let mut x = [0.0; 3];
    for (col, xi) in x.iter_mut().enumerate() {
        let mut m = ata;
        for r in 0..3 {
            m[r][col] = atb[r];
        }
        *xi = det3(&m) / det;
    }
    let [d, rho, c] = x;
    Ok((d > 0.0 && rho > 0.0 && c > 0.0).then(|| (d, rho, rho / c)))
}

/// Pooled and per-sample fits for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassParams {
    pub label: usize,
    pub class_name: String,
    pub n_samples: usize,
    pub pooled: PhysicalFit,
    pub per_sample: Vec<PhysicalFit>,
}

impl ClassParams {
    /// Mean and population standard deviation of the identifiable per-sample fits.
    pub fn spread(&self, pick: impl Fn(&PhysicalFit) -> f64) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self.per_sample.iter().filter(|f| f.identifiable).map(pick).collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some((mean, var.sqrt()))
    }
}

/// Runs [`finetune_physical`] per class (pooled over the class's samples) and
/// per sample, starting every fit from the weights in `start`.
pub fn per_class_params(
    start: &ParameterSet,
    samples: &[&LoadedSample],
    class_names: &[String],
    cfg: &FinetuneConfig,
) -> Result<Vec<ClassParams>> {
    let mut out = Vec::with_capacity(class_names.len());
    for (label, name) in class_names.iter().enumerate() {
        let members: Vec<&LoadedSample> = samples.iter().copied().filter(|s| s.entry.label == label).collect();
        let pairs: Vec<ObservedPair<'_>> = members.iter().map(|s| ObservedPair::from_sample(s)).collect();
        let pooled = finetune_physical(start, &pairs, cfg)?;
        let per_sample = pairs
            .iter()
            .map(|p| finetune_physical(start, std::slice::from_ref(p), cfg))
            .collect::<Result<Vec<_>>>()?;
        out.push(ClassParams {
            label,
            class_name: name.clone(),
            n_samples: members.len(),
            pooled,
            per_sample,
        });
    }
    Ok(out)
}
