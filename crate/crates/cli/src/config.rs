//! Run configuration: preset defaults, overlaid by a JSON file, overlaid by flags.

use std::fs;
use std::path::{Path, PathBuf};

use physnet::sim::GenConfig;
use physnet::train::{FinetuneConfig, LambdaConfig, LambdaMode, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable naming the root under which default output
/// directories are created.
pub const REPORT_DIR_ENV: &str = "PHYSNET_REPORT_DIR";
pub const DEFAULT_REPORT_ROOT: &str = "physnet-runs";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

pub fn report_root() -> PathBuf {
    std::env::var_os(REPORT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_REPORT_ROOT))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size backbone and schedule: 112x112 inputs, 100 epochs.
    #[default]
    Standard,
    /// Narrow backbone on 56x56 inputs, 20 epochs; about a minute per run on one core.
    Desk,
}

/// Which auxiliary terms a run switches off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub disable_physics: bool,
    pub disable_boundary: bool,
    pub disable_temporal: bool,
    /// Holds the physics weight constant at this value.
    pub fixed_lambda: Option<f64>,
}

impl Ablation {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.fixed_lambda {
            cfg.lambda = LambdaConfig {
                mode: LambdaMode::Fixed,
                lambda0: v,
                ..cfg.lambda
            };
        }
        if self.disable_physics {
            cfg.lambda = LambdaConfig {
                mode: LambdaMode::Fixed,
                lambda0: 0.0,
                ..cfg.lambda
            };
        }
        if self.disable_boundary {
            cfg.lambda_b = 0.0;
        }
        if self.disable_temporal {
            cfg.lambda_t = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSettings {
    pub n_per_class: usize,
    pub seed: u64,
    pub config: GenConfig,
}

/// One named configuration of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AblationRow {
    Full,
    NoPhysics,
    NoBoundary,
    NoTemporal,
    FixedLambda,
}

impl AblationRow {
    pub const ALL: [AblationRow; 5] = [
        AblationRow::Full,
        AblationRow::NoPhysics,
        AblationRow::NoBoundary,
        AblationRow::NoTemporal,
        AblationRow::FixedLambda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Full => "full",
            AblationRow::NoPhysics => "no-physics",
            AblationRow::NoBoundary => "no-boundary",
            AblationRow::NoTemporal => "no-temporal",
            AblationRow::FixedLambda => "fixed-lambda",
        }
    }

    /// The row's switches on top of the run-wide ones; the fixed weight is
    /// the schedule's starting value.
    pub fn ablation(self, base: &Ablation, lambda0: f64) -> Ablation {
        let mut a = *base;
        match self {
            AblationRow::Full => {}
            AblationRow::NoPhysics => a.disable_physics = true,
            AblationRow::NoBoundary => a.disable_boundary = true,
            AblationRow::NoTemporal => a.disable_temporal = true,
            AblationRow::FixedLambda => a.fixed_lambda = Some(a.fixed_lambda.unwrap_or(lambda0)),
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSettings {
    pub rows: Vec<AblationRow>,
    /// Training seeds; every row is trained once per seed.
    pub seeds: Vec<u64>,
}

/// Everything that determines a run. Written next to every run's outputs as
/// `resolved_config.json`; passing that file back with `--config` replays the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub preset: Preset,
    pub dataset_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_dir: Option<PathBuf>,
    pub gen: GenSettings,
    /// Training settings with the ablation switches already applied.
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub finetune: FinetuneConfig,
    pub ablate: AblateSettings,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (gen, train) = match preset {
            Preset::Standard => (GenConfig::default(), TrainConfig::default()),
            Preset::Desk => (GenConfig::desk(), TrainConfig::desk()),
        };
        Self {
            command: String::new(),
            preset,
            dataset_dir: None,
            checkpoint_dir: None,
            report_dir: None,
            gen: GenSettings {
                n_per_class: 200,
                seed: 0,
                config: gen,
            },
            train,
            ablation: Ablation::default(),
            finetune: FinetuneConfig::default(),
            ablate: AblateSettings {
                rows: AblationRow::ALL.to_vec(),
                seeds: vec![0],
            },
        }
    }

    /// The preset (from the flag, else the file, else `standard`) with the file's
    /// keys overlaid. Unknown keys anywhere in the file are rejected.
    pub fn resolve(preset: Option<Preset>, file: Option<&Path>) -> Result<Self, CliError> {
        let overlay = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
                if !v.is_object() {
                    return Err(CliError::Usage(format!(
                        "config {} must be a JSON object",
                        path.display()
                    )));
                }
                Some(v)
            }
            None => None,
        };
        let from_file = overlay
            .as_ref()
            .and_then(|v| v.get("preset"))
            .map(|p| serde_json::from_value::<Preset>(p.clone()))
            .transpose()
            .map_err(|e| CliError::Usage(format!("bad preset in config: {e}")))?;
        let preset = preset.or(from_file).unwrap_or_default();
        let mut merged = serde_json::to_value(Self::preset(preset)).expect("config serializes");
        if let Some(o) = overlay {
            merge(&mut merged, o);
        }
        let mut cfg: Self =
            serde_json::from_value(merged).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.preset = preset;
        Ok(cfg)
    }

    /// SHA-256 of the configuration with output locations and the command
    /// name cleared, so the same settings hash equally wherever they run.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.command.clear();
        c.dataset_dir = None;
        c.checkpoint_dir = None;
        c.report_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join(RESOLVED_CONFIG_FILE), self)
    }
}

/// Recursively overlays `patch` onto `base`: objects merge key by key,
/// anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
