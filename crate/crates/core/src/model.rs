//! The dual-branch network: a small residual convolutional backbone, two
//! field heads reading an intermediate feature map, a classifier on the last
//! stage, and three softplus-constrained physical scalars.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Bound, ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, IoContext, Result};
use crate::seed::{derive_seed, label_hash};
use crate::sim::GrayImage;

/// Raw names of the three physical scalars.
pub const W_D: &str = "phys.w_D";
pub const W_RHO: &str = "phys.w_rho";
pub const W_K: &str = "phys.w_K";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Side of the square single-channel input image.
    pub input_size: usize,
    pub stages: Vec<StageConfig>,
    /// 1-based index of the stage whose output feeds the field heads.
    pub tap_stage: usize,
    /// Hidden channels of each field head.
    pub head_hidden: usize,
    /// Grid spacing assigned to the tap feature map.
    pub tap_spacing: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        let stage = |channels, stride| StageConfig { channels, stride };
        Self {
            input_size: 112,
            stages: vec![stage(16, 2), stage(32, 2), stage(64, 2), stage(128, 2)],
            tap_stage: 3,
            head_hidden: 16,
            tap_spacing: 128.0 / 14.0,
        }
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    // 3x3 kernel, padding 1
    (size - 1) / stride + 1
}

impl BackboneConfig {
    /// A narrower network on 56x56 inputs that trains in about a minute on one
    /// CPU core; its tap grid matches [`GenConfig::desk`](crate::sim::GenConfig::desk).
    pub fn desk() -> Self {
        let stage = |channels, stride| StageConfig { channels, stride };
        Self {
            input_size: 56,
            stages: vec![stage(8, 2), stage(16, 2), stage(16, 1), stage(32, 2)],
            tap_stage: 3,
            head_hidden: 8,
            tap_spacing: 128.0 / 14.0,
        }
    }

    /// Spatial side of every stage output.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut size = self.input_size;
        self.stages
            .iter()
            .map(|s| {
                size = conv_out(size, s.stride.max(1));
                size
            })
            .collect()
    }

    pub fn tap_size(&self) -> usize {
        self.stage_sizes()[self.tap_stage - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.input_size < 3 {
            return bad(format!("input size {} < 3", self.input_size));
        }
        if self.stages.len() < 2 {
            return bad("need at least two stages".into());
        }
        if self.stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return bad("stage channels and strides must be >= 1".into());
        }
        if self.tap_stage == 0 || self.tap_stage >= self.stages.len() {
            return bad(format!(
                "tap stage {} must lie before the final stage (1..{})",
                self.tap_stage,
                self.stages.len() - 1
            ));
        }
        if self.head_hidden == 0 {
            return bad("head_hidden must be >= 1".into());
        }
        if !(self.tap_spacing > 0.0 && self.tap_spacing.is_finite()) {
            return bad(format!("tap spacing must be > 0, got {}", self.tap_spacing));
        }
        let tap = self.tap_size();
        if tap < 3 {
            return bad(format!("tap feature map is {tap}x{tap}, the stencil needs >= 3x3"));
        }
        Ok(())
    }
}

/// Architecture descriptor stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub n_classes: usize,
    pub class_names: Vec<String>,
}

impl ModelSpec {
    pub const PARAMS_FILE: &'static str = "model.params";
    pub const ARCH_FILE: &'static str = "arch.json";

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need >= 2 classes, got {}", self.n_classes)));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.n_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.n_classes
            )));
        }
        Ok(())
    }
}

/// Writes `model.params` and `arch.json` into `dir`.
pub fn save_checkpoint(dir: &Path, spec: &ModelSpec, params: &ParameterSet) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    params.save(&dir.join(ModelSpec::PARAMS_FILE))?;
    let arch = dir.join(ModelSpec::ARCH_FILE);
    fs::write(&arch, serde_json::to_vec_pretty(spec)?).at(&arch)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelSpec, ParameterSet)> {
    let arch = dir.join(ModelSpec::ARCH_FILE);
    let spec: ModelSpec = serde_json::from_slice(&fs::read(&arch).at(&arch)?)?;
    spec.validate()?;
    let params = ParameterSet::load(&dir.join(ModelSpec::PARAMS_FILE))?;
    for name in param_shapes(&spec.backbone, spec.n_classes).iter().map(|(n, ..)| n) {
        if !params.contains(name) {
            return Err(Error::UnknownParameter(name.clone()));
        }
    }
    Ok((spec, params))
}

/// How a parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform(usize),
    Zero,
    /// Uniform in `[-1, 1]`.
    UnitUniform,
}

fn param_shapes(cfg: &BackboneConfig, n_classes: usize) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let mut conv = |name: String, f: usize, c: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![f, c, k, k], Init::HeUniform(c * k * k)));
        out.push((format!("{name}.bias"), vec![f], Init::Zero));
    };
    let mut in_ch = 1;
    for (i, s) in cfg.stages.iter().enumerate() {
        conv(format!("stage{}.down", i + 1), s.channels, in_ch, 3);
        conv(format!("stage{}.conv", i + 1), s.channels, s.channels, 3);
        in_ch = s.channels;
    }
    let tap_ch = cfg.stages[cfg.tap_stage - 1].channels;
    for head in ["u_head", "dudt_head"] {
        conv(format!("{head}.conv1"), cfg.head_hidden, tap_ch, 3);
        conv(format!("{head}.conv2"), 1, cfg.head_hidden, 1);
    }
    let last = cfg.stages.last().expect("validated").channels;
    out.push(("cls.weight".into(), vec![n_classes, last], Init::HeUniform(last)));
    out.push(("cls.bias".into(), vec![n_classes], Init::Zero));
    for name in [W_D, W_RHO, W_K] {
        out.push((name.into(), vec![1], Init::UnitUniform));
    }
    out
}

/// Fresh parameters. Every tensor draws from its own stream, keyed by
/// `(seed, name)`, so adding a parameter never perturbs the others.
pub fn init_model(cfg: &BackboneConfig, n_classes: usize, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    if n_classes < 2 {
        return Err(Error::Config(format!("need >= 2 classes, got {n_classes}")));
    }
    let mut params = ParameterSet::new();
    for (name, shape, init) in param_shapes(cfg, n_classes) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[label_hash(&name)]));
        let value = match init {
            Init::Zero => Tensor::zeros(&shape),
            Init::HeUniform(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound))
            }
            Init::UnitUniform => Tensor::from_fn(&shape, |_| rng.random_range(-1.0..=1.0)),
        };
        params.insert(name, value, true);
    }
    Ok(params)
}

/// Softplus of the three raw physical weights: `(D, rho, K)`.
pub fn expose_physical_params(params: &ParameterSet) -> Result<(f64, f64, f64)> {
    let get = |n| params.get(n).map(|t| softplus(t.item()));
    Ok((get(W_D)?, get(W_RHO)?, get(W_K)?))
}

/// Which parts of the network a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Classifier, both field heads and the physical scalars.
    Full,
    /// Stages up to the tap and the u head only (the second augmented view).
    DensityOnly,
    /// Classifier only: the physics-free baseline.
    ClassifierOnly,
}

/// Handles into the tape for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub logits: Option<Var>,
    pub u: Option<Var>,
    pub dudt: Option<Var>,
    pub d: Option<Var>,
    pub rho: Option<Var>,
    pub k: Option<Var>,
}

fn conv_bias(tape: &mut Tape, bound: &Bound, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
    let w = bound.get(&format!("{name}.weight"))?;
    let b = bound.get(&format!("{name}.bias"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    tape.bias_add(y, b)
}

fn head(tape: &mut Tape, bound: &Bound, x: Var, name: &str) -> Result<Var> {
    let h = conv_bias(tape, bound, x, &format!("{name}.conv1"), 1, 1)?;
    let h = tape.relu(h);
    conv_bias(tape, bound, h, &format!("{name}.conv2"), 1, 0)
}

/// The three physical scalars as tape variables.
pub fn physical_vars(tape: &mut Tape, bound: &Bound) -> Result<(Var, Var, Var)> {
    let d = bound.get(W_D)?;
    let rho = bound.get(W_RHO)?;
    let k = bound.get(W_K)?;
    Ok((tape.softplus(d), tape.softplus(rho), tape.softplus(k)))
}

/// Records a forward pass of `images: [N,1,S,S]` on `tape`.
pub fn forward(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &BackboneConfig,
    images: Var,
    mode: ForwardMode,
) -> Result<ModelOutput> {
    let shape = tape.value(images).shape().to_vec();
    let s = cfg.input_size;
    if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
        return Err(Error::Shape(format!("expected images [N,1,{s},{s}], got {shape:?}")));
    }
    let last_stage = match mode {
        ForwardMode::DensityOnly => cfg.tap_stage,
        _ => cfg.stages.len(),
    };
    let mut x = images;
    let mut tap = None;
    for (i, st) in cfg.stages.iter().take(last_stage).enumerate() {
        let y = conv_bias(tape, bound, x, &format!("stage{}.down", i + 1), st.stride, 1)?;
        let y = tape.relu(y);
        let z = conv_bias(tape, bound, y, &format!("stage{}.conv", i + 1), 1, 1)?;
        let z = tape.add(z, y)?;
        x = tape.relu(z);
        if i + 1 == cfg.tap_stage {
            tap = Some(x);
        }
    }
    let mut out = ModelOutput {
        logits: None,
        u: None,
        dudt: None,
        d: None,
        rho: None,
        k: None,
    };
    if mode != ForwardMode::DensityOnly {
        let pooled = tape.global_avg_pool(x)?;
        let w = bound.get("cls.weight")?;
        let b = bound.get("cls.bias")?;
        out.logits = Some(tape.dense(pooled, w, b)?);
    }
    if mode != ForwardMode::ClassifierOnly {
        let tap = tap.expect("tap stage precedes the last evaluated stage");
        let (d, rho, k) = physical_vars(tape, bound)?;
        let raw = head(tape, bound, tap, "u_head")?;
        let sig = tape.sigmoid(raw);
        out.u = Some(tape.mul(sig, k)?);
        if mode == ForwardMode::Full {
            out.dudt = Some(head(tape, bound, tap, "dudt_head")?);
        }
        out.d = Some(d);
        out.rho = Some(rho);
        out.k = Some(k);
    }
    Ok(out)
}

/// Stacks images into a `[N,1,S,S]` tensor.
pub fn images_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let s = first.size;
    let mut data = Vec::with_capacity(images.len() * s * s);
    for img in images {
        if img.size != s || img.pixels.len() != s * s {
            return Err(Error::Shape(format!(
                "mixed image sizes in batch: {} vs {}",
                img.size, s
            )));
        }
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(vec![images.len(), 1, s, s], data)
}

/// Plain values from an inference pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Tensor,
    pub u: Tensor,
    pub dudt: Tensor,
    pub d: f64,
    pub rho: f64,
    pub k: f64,
}

impl Prediction {
    pub fn classes(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let m = logits.shape()[1];
    logits
        .data()
        .chunks(m)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Full forward pass without gradient bookkeeping.
pub fn predict(params: &ParameterSet, cfg: &BackboneConfig, images: Tensor) -> Result<Prediction> {
    let mut tape = Tape::new();
    let bound = params.bind_constant(&mut tape);
    let x = tape.constant(images);
    let out = forward(&mut tape, &bound, cfg, x, ForwardMode::Full)?;
    let take = |v: Option<Var>| tape.value(v.expect("full pass")).clone();
    let (d, rho, k) = expose_physical_params(params)?;
    Ok(Prediction {
        logits: take(out.logits),
        u: take(out.u),
        dudt: take(out.dudt),
        d,
        rho,
        k,
    })
}
