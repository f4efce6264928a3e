//! The end-to-end training loop.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{make_augmented_pair, AugmentConfig};
use super::loss::{boundary_loss, physics_loss, temporal_loss, total_loss, LossBreakdown, LossTerms, LossWeights};
use super::optim::{adamw_step, AdamWConfig, AdamWState};
use super::schedule::{cosine_lr, LambdaConfig, LambdaScheduler};
use crate::autodiff::{backward, Bound, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, IoContext, Result};
use crate::model::{argmax_rows, forward, images_tensor, init_model, predict, BackboneConfig, ForwardMode, ModelSpec};
use crate::seed::derive_seed;
use crate::sim::{Dataset, LoadedSample, Split};

/// Every training hyperparameter. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: BackboneConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Schedule of the physics-residual weight.
    pub lambda: LambdaConfig,
    pub lambda_b: f64,
    pub lambda_t: f64,
    pub ema_decay: f64,
    /// Pseudo-time between the two augmented views.
    pub pseudo_dt: f64,
    /// Gradient-magnitude quantile above which points count as boundary.
    pub boundary_quantile: f64,
    pub augment: AugmentConfig,
    pub adam: AdamWConfig,
    /// When false the field heads are never evaluated (plain classifier).
    pub physics_branch: bool,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: BackboneConfig::default(),
            epochs: 100,
            batch_size: 16,
            lr: 2e-4,
            weight_decay: 1e-4,
            lambda: LambdaConfig::default(),
            lambda_b: 0.005,
            lambda_t: 0.01,
            ema_decay: 0.999,
            pseudo_dt: 1.0,
            boundary_quantile: 0.8,
            augment: AugmentConfig::default(),
            adam: AdamWConfig::default(),
            physics_branch: true,
            seed: 0,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    /// Settings for [`BackboneConfig::desk`] on a few hundred samples per class.
    pub fn desk() -> Self {
        Self {
            model: BackboneConfig::desk(),
            epochs: 20,
            lr: 2e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("epochs and batch sizes must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("learning rate must be > 0 and weight decay >= 0");
        }
        let l = &self.lambda;
        if [l.lambda0, l.lambda_max, l.alpha, l.eps, self.lambda_b, self.lambda_t]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return bad("lambda weights, alpha and eps must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&l.smoothing) {
            return bad("lambda smoothing must lie in [0, 1)");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if !(self.pseudo_dt > 0.0) {
            return bad("pseudo_dt must be > 0");
        }
        if !(self.boundary_quantile > 0.0 && self.boundary_quantile < 1.0) {
            return bad("boundary_quantile must lie in (0, 1)");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps > 0");
        }
        Ok(())
    }
}

/// Per-epoch means of the batch breakdowns plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Physics weight after the last batch of the epoch.
    pub lambda_p: f64,
    pub lambda_b: f64,
    pub lambda_t: f64,
    pub l_cls: f64,
    pub l_physics: f64,
    pub l_boundary: f64,
    pub l_temporal: f64,
    pub total: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub spec: ModelSpec,
    pub params: ParameterSet,
    pub log: Vec<EpochLog>,
}

/// Records the loss of one batch. `view2` feeds only the density head;
/// `lambda_p` maps the batch's classification loss to the physics weight.
pub fn batch_objective(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &TrainConfig,
    view1: Tensor,
    view2: Option<Tensor>,
    labels: &[usize],
    lambda_p: impl FnOnce(f64) -> f64,
) -> Result<(Var, LossBreakdown, Var)> {
    let x1 = tape.constant(view1);
    let mode = if cfg.physics_branch {
        ForwardMode::Full
    } else {
        ForwardMode::ClassifierOnly
    };
    let out1 = forward(tape, bound, &cfg.model, x1, mode)?;
    let logits = out1.logits.expect("classifier evaluated");
    let cls = tape.softmax_cross_entropy(logits, labels)?;
    let l_cls = tape.value(cls).item();
    let (terms, weights) = if cfg.physics_branch {
        let (u1, dudt1) = (out1.u.expect("full pass"), out1.dudt.expect("full pass"));
        let (d, rho, k) = (out1.d.expect("full"), out1.rho.expect("full"), out1.k.expect("full"));
        let spacing = cfg.model.tap_spacing;
        let physics = physics_loss(tape, u1, dudt1, d, rho, k, spacing)?;
        let boundary = boundary_loss(tape, u1, cfg.boundary_quantile, spacing)?;
        let temporal = match view2 {
            Some(v2) => {
                let x2 = tape.constant(v2);
                let out2 = forward(tape, bound, &cfg.model, x2, ForwardMode::DensityOnly)?;
                Some(temporal_loss(
                    tape,
                    u1,
                    dudt1,
                    out2.u.expect("density pass"),
                    cfg.pseudo_dt,
                )?)
            }
            None => None,
        };
        (
            LossTerms {
                cls,
                physics: Some(physics),
                boundary: Some(boundary),
                temporal,
            },
            LossWeights {
                lambda_p: lambda_p(l_cls),
                lambda_b: cfg.lambda_b,
                lambda_t: cfg.lambda_t,
            },
        )
    } else {
        (
            LossTerms {
                cls,
                physics: None,
                boundary: None,
                temporal: None,
            },
            LossWeights {
                lambda_p: 0.0,
                lambda_b: 0.0,
                lambda_t: 0.0,
            },
        )
    };
    let (total, breakdown) = total_loss(tape, terms, weights)?;
    Ok((total, breakdown, logits))
}

/// Class predictions for `samples`, evaluated in chunks.
pub fn predict_classes(
    params: &ParameterSet,
    cfg: &BackboneConfig,
    samples: &[&LoadedSample],
    batch: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        out.extend(predict(params, cfg, images_tensor(&imgs)?)?.classes());
    }
    Ok(out)
}

const SHUFFLE_STREAM: u64 = 0x5_4FF1E;
const AUGMENT_STREAM: u64 = 0xA_0613;

/// Trains from a fresh initialisation; see [`train_with_hook`].
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(ds, cfg, |_, _| Ok(()))
}

/// Trains on the train split, evaluating the validation split after every
/// epoch. `hook` sees each epoch's log entry and parameters.
pub fn train_with_hook(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut hook: impl FnMut(&EpochLog, &ParameterSet) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if ds.image_size() != cfg.model.input_size {
        return Err(Error::Config(format!(
            "dataset images are {0}x{0} but the model expects {1}x{1}",
            ds.image_size(),
            cfg.model.input_size
        )));
    }
    let gen = &ds.manifest.config;
    if gen.tap_size != cfg.model.tap_size() || (gen.tap_spacing() - cfg.model.tap_spacing).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "the model's field grid is {0}x{0} at spacing {1} but the dataset stores {2}x{2} at spacing {3}",
            cfg.model.tap_size(),
            cfg.model.tap_spacing,
            gen.tap_size,
            gen.tap_spacing()
        )));
    }
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    let val = ds.split(Split::Val);
    let spec = ModelSpec {
        backbone: cfg.model.clone(),
        n_classes: ds.n_classes(),
        class_names: ds.manifest.class_names(),
    };
    let mut params = init_model(&cfg.model, spec.n_classes, cfg.seed)?;
    let mut adam = AdamWState::new();
    let mut scheduler = LambdaScheduler::new(cfg.lambda, cfg.ema_decay);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.lr, cfg.epochs);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[SHUFFLE_STREAM, epoch as u64],
        )));
        let mut sums = LossBreakdown::default();
        let mut correct = 0usize;
        let n_batches = order.len().div_ceil(cfg.batch_size);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<&LoadedSample> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.entry.label).collect();
            let (mut v1, mut v2) = (Vec::new(), Vec::new());
            for (s, &i) in samples.iter().zip(idx) {
                let seed = derive_seed(cfg.seed, &[AUGMENT_STREAM, epoch as u64, i as u64]);
                let pair = make_augmented_pair(&s.image, seed, &cfg.augment);
                v1.push(pair.view1);
                v2.push(pair.view2);
            }
            let view1 = images_tensor(&v1.iter().collect::<Vec<_>>())?;
            let view2 = if cfg.physics_branch {
                Some(images_tensor(&v2.iter().collect::<Vec<_>>())?)
            } else {
                None
            };

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let (total, br, logits) = batch_objective(&mut tape, &bound, cfg, view1, view2, &labels, |l| {
                scheduler.next(l)
            })
            .map_err(|e| match e {
                Error::NanLoss { loss, .. } => Error::NanLoss {
                    epoch: epoch + 1,
                    batch: b,
                    loss,
                },
                other => other,
            })?;
            let grads = backward(&tape, total, &params, &bound)?;
            adamw_step(&mut params, &grads, &mut adam, lr, cfg.weight_decay, &cfg.adam)?;

            correct += argmax_rows(tape.value(logits))
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            sums.l_cls += br.l_cls;
            sums.l_physics += br.l_physics;
            sums.l_boundary += br.l_boundary;
            sums.l_temporal += br.l_temporal;
            sums.total += br.total;
            sums.lambda_b = br.lambda_b;
            sums.lambda_t = br.lambda_t;
            sums.lambda_p = br.lambda_p;
        }
        let nb = n_batches as f64;
        let val_acc = if val.is_empty() {
            None
        } else {
            let pred = predict_classes(&params, &cfg.model, &val, cfg.eval_batch_size)?;
            let hits = pred.iter().zip(&val).filter(|(p, s)| **p == s.entry.label).count();
            Some(hits as f64 / val.len() as f64)
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            lambda_p: sums.lambda_p,
            lambda_b: sums.lambda_b,
            lambda_t: sums.lambda_t,
            l_cls: sums.l_cls / nb,
            l_physics: sums.l_physics / nb,
            l_boundary: sums.l_boundary / nb,
            l_temporal: sums.l_temporal / nb,
            total: sums.total / nb,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        };
        hook(&entry, &params)?;
        log.push(entry);
    }
    Ok(TrainOutcome { spec, params, log })
}

pub const LOG_JSON: &str = "train_log.jsonl";
pub const LOG_CSV: &str = "train_log.csv";

/// Writes one JSON record per epoch and a CSV mirror.
pub fn write_log(dir: &Path, log: &[EpochLog]) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let mut jsonl = String::new();
    for e in log {
        jsonl.push_str(&serde_json::to_string(e)?);
        jsonl.push('\n');
    }
    let path = dir.join(LOG_JSON);
    fs::write(&path, jsonl).at(&path)?;
    let path = dir.join(LOG_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush().at(&path)?;
    Ok(())
}

pub fn read_log(dir: &Path) -> Result<Vec<EpochLog>> {
    let path = dir.join(LOG_JSON);
    let text = fs::read_to_string(&path).at(&path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
