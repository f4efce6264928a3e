use std::fs;
use std::path::{Path, PathBuf};

use physnet::model::{load_checkpoint, save_checkpoint, ModelSpec};
use physnet::oracles::{self, CheckOutcome, OracleConfig};
use physnet::sim::{generate_dataset, ClassProfile, Dataset, DatasetManifest, Split};
use physnet::train::{
    evaluate, per_class_params, train_with_hook, write_log, ClassParams, EpochLog, MetricsReport, TrainConfig, LOG_CSV,
};
use serde::Serialize;

use crate::config::{report_root, write_json, AblationRow, RunConfig, RESOLVED_CONFIG_FILE};
use crate::error::CliError;

/// Where a number came from: enough to regenerate it.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub train_seed: Option<u64>,
    pub train_config_hash: Option<String>,
    pub dataset_seed: u64,
    pub dataset_checksum: String,
}

fn dir_or(flag: Option<PathBuf>, configured: &Option<PathBuf>, default: &str) -> PathBuf {
    flag.or_else(|| configured.clone())
        .unwrap_or_else(|| report_root().join(default))
}

fn load_dataset(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.join(DatasetManifest::FILE).exists() {
        return Err(CliError::Runtime(format!(
            "no dataset manifest in {} (run `physnet gen` first)",
            dir.display()
        )));
    }
    Ok(Dataset::load(dir)?)
}

/// Points the model's field grid at the dataset's stored density grid.
fn fit_to_dataset(cfg: &mut TrainConfig, ds: &Dataset) {
    cfg.model.tap_spacing = ds.manifest.config.tap_spacing();
}

pub fn gen(mut cfg: RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    cfg.command = "gen".into();
    if cfg.gen.n_per_class == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let out = dir_or(out, &cfg.dataset_dir, "dataset");
    cfg.dataset_dir = Some(out.clone());
    let manifest = generate_dataset(
        &ClassProfile::defaults(),
        cfg.gen.n_per_class,
        cfg.gen.seed,
        &cfg.gen.config,
        &out,
    )?;
    cfg.write_snapshot(&out)?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    for (class, n) in &manifest.class_counts {
        println!("  {class:<12} {n}");
    }
    for (split, n) in &manifest.split_counts {
        println!("  split {:<6} {n}", format!("{split:?}").to_lowercase());
    }
    println!("manifest sha256 {}", manifest.checksum()?);
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    provenance: Provenance,
    epochs: usize,
    last: Option<&'a EpochLog>,
}

pub fn train(mut cfg: RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    cfg.command = "train".into();
    let data = dir_or(data, &cfg.dataset_dir, "dataset");
    let out = dir_or(out, &cfg.checkpoint_dir, "train");
    let ds = load_dataset(&data)?;
    cfg.dataset_dir = Some(data);
    cfg.checkpoint_dir = Some(out.clone());
    fit_to_dataset(&mut cfg.train, &ds);
    cfg.ablation.apply(&mut cfg.train);
    cfg.train.validate()?;
    cfg.write_snapshot(&out)?;

    let epochs = cfg.train.epochs;
    let outcome = train_with_hook(&ds, &cfg.train, |e, _| {
        println!(
            "epoch {:>3}/{epochs}  lr {:.2e}  l_cls {:.4}  l_phys {:.3e}  l_bnd {:.3e}  l_tmp {:.3e}  lambda_p {:.4}  train {:.3}  val {}",
            e.epoch,
            e.lr,
            e.l_cls,
            e.l_physics,
            e.l_boundary,
            e.l_temporal,
            e.lambda_p,
            e.train_acc,
            e.val_acc.map_or("-".to_string(), |a| format!("{a:.3}"))
        );
        Ok(())
    })
    .map_err(|e| match e {
        physnet::Error::NanLoss { .. } => CliError::Runtime(format!("training aborted: {e}")),
        other => other.into(),
    })?;
    save_checkpoint(&out, &outcome.spec, &outcome.params)?;
    write_log(&out, &outcome.log)?;
    let summary = TrainSummary {
        provenance: Provenance {
            config_hash: cfg.hash(),
            train_seed: Some(cfg.train.seed),
            train_config_hash: Some(cfg.hash()),
            dataset_seed: ds.manifest.seed,
            dataset_checksum: ds.manifest.checksum()?,
        },
        epochs: outcome.log.len(),
        last: outcome.log.last(),
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassParamSummary {
    pub class_name: String,
    pub n_samples: usize,
    /// Fit pooled over every sample of the class.
    pub d: f64,
    pub rho: f64,
    pub k: f64,
    pub identifiable: bool,
    /// Mean and standard deviation of the per-sample fits.
    pub d_spread: Option<(f64, f64)>,
    pub rho_spread: Option<(f64, f64)>,
    pub k_spread: Option<(f64, f64)>,
}

impl From<&ClassParams> for ClassParamSummary {
    fn from(c: &ClassParams) -> Self {
        Self {
            class_name: c.class_name.clone(),
            n_samples: c.n_samples,
            d: c.pooled.d,
            rho: c.pooled.rho,
            k: c.pooled.k,
            identifiable: c.pooled.identifiable,
            d_spread: c.spread(|f| f.d),
            rho_spread: c.spread(|f| f.rho),
            k_spread: c.spread(|f| f.k),
        }
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    provenance: Provenance,
    split: Split,
    checkpoint: &'a Path,
    metrics: &'a MetricsReport,
    class_params: Vec<ClassParamSummary>,
}

/// The training run's resolved configuration, if the checkpoint directory has one.
fn training_config(checkpoint: &Path) -> Option<RunConfig> {
    RunConfig::resolve(None, Some(&checkpoint.join(RESOLVED_CONFIG_FILE))).ok()
}

pub fn eval(
    mut cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    split: Split,
    finetune: bool,
) -> Result<(), CliError> {
    cfg.command = "eval".into();
    let checkpoint = dir_or(checkpoint, &cfg.checkpoint_dir, "train");
    if !checkpoint.join(ModelSpec::ARCH_FILE).exists() || !checkpoint.join(ModelSpec::PARAMS_FILE).exists() {
        return Err(CliError::Runtime(format!("no checkpoint in {}", checkpoint.display())));
    }
    let trained = training_config(&checkpoint);
    let data = data
        .or_else(|| cfg.dataset_dir.clone())
        .or_else(|| trained.as_ref().and_then(|t| t.dataset_dir.clone()))
        .unwrap_or_else(|| report_root().join("dataset"));
    let out = dir_or(out, &cfg.report_dir, "eval");
    let (spec, params) = load_checkpoint(&checkpoint)?;
    let ds = load_dataset(&data)?;
    cfg.dataset_dir = Some(data);
    cfg.checkpoint_dir = Some(checkpoint.clone());
    cfg.report_dir = Some(out.clone());
    cfg.write_snapshot(&out)?;

    let samples = ds.split(split);
    let metrics = evaluate(&params, &spec, &samples, cfg.train.eval_batch_size)?;
    let class_params = if finetune {
        per_class_params(&params, &samples, &spec.class_names, &cfg.finetune)?
    } else {
        Vec::new()
    };
    let provenance = Provenance {
        config_hash: cfg.hash(),
        train_seed: trained.as_ref().map(|t| t.train.seed),
        train_config_hash: trained.as_ref().map(RunConfig::hash),
        dataset_seed: ds.manifest.seed,
        dataset_checksum: ds.manifest.checksum()?,
    };
    let report = EvalReport {
        provenance: provenance.clone(),
        split,
        checkpoint: &checkpoint,
        metrics: &metrics,
        class_params: class_params.iter().map(ClassParamSummary::from).collect(),
    };
    write_json(&out.join("metrics.json"), &report)?;
    write_confusion(&out.join("confusion.csv"), &metrics)?;
    write_class_params(&out.join("class_params.csv"), &class_params, &provenance)?;
    let losses = checkpoint.join(LOG_CSV);
    if losses.exists() {
        let dst = out.join("losses.csv");
        fs::copy(&losses, &dst).map_err(|e| CliError::io(&dst, e))?;
    }
    let summary = summary_text(&report);
    let path = out.join("summary.txt");
    fs::write(&path, &summary).map_err(|e| CliError::io(&path, e))?;
    print!("{summary}");
    Ok(())
}

fn write_confusion(path: &Path, m: &MetricsReport) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(m.class_names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in m.class_names.iter().zip(&m.classification.confusion) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// One row per sample fit: the data behind per-class parameter violins.
fn write_class_params(path: &Path, classes: &[ClassParams], p: &Provenance) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "class",
        "sample",
        "d",
        "rho",
        "k",
        "fit_loss",
        "identifiable",
        "config_hash",
        "dataset_seed",
    ])?;
    for c in classes {
        for (i, f) in c.per_sample.iter().enumerate() {
            w.write_record([
                c.class_name.clone(),
                i.to_string(),
                f.d.to_string(),
                f.rho.to_string(),
                f.k.to_string(),
                f.loss.to_string(),
                f.identifiable.to_string(),
                p.config_hash.clone(),
                p.dataset_seed.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn summary_text(r: &EvalReport<'_>) -> String {
    let m = r.metrics;
    let mut s = String::new();
    s.push_str(&format!("split {:?}: {} samples\n", r.split, m.n_samples));
    s.push_str(&format!(
        "accuracy {:.4}  macro-F1 {:.4}\n",
        m.classification.accuracy, m.classification.macro_f1
    ));
    s.push_str(&format!("residual |R| {:.5} ± {:.5}\n", m.residual_mean, m.residual_sd));
    if let Some(mse) = m.u_mse {
        s.push_str(&format!("density MSE vs simulator {mse:.5}\n"));
    }
    s.push_str(&format!("learned D {:.4}  rho {:.4}  K {:.4}\n", m.d, m.rho, m.k));
    s.push_str("confusion (rows true, columns predicted):\n");
    for (name, row) in m.class_names.iter().zip(&m.classification.confusion) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
        s.push_str(&format!("  {name:<12}{}\n", cells.join("")));
    }
    if !r.class_params.is_empty() {
        s.push_str("per-class fine-tuned parameters (pooled; per-sample mean ± sd):\n");
        for c in &r.class_params {
            let spread = |x: Option<(f64, f64)>| x.map_or("-".to_string(), |(m, sd)| format!("{m:.4} ± {sd:.4}"));
            s.push_str(&format!(
                "  {:<12} D {:.4} ({})  rho {:.4} ({})  K {:.3}{}\n",
                c.class_name,
                c.d,
                spread(c.d_spread),
                c.rho,
                spread(c.rho_spread),
                c.k,
                if c.identifiable { "" } else { "  [not identifiable]" }
            ));
        }
    }
    s.push_str(&format!(
        "config {}  dataset seed {}  train seed {}\n",
        r.provenance.config_hash,
        r.provenance.dataset_seed,
        r.provenance.train_seed.map_or("-".to_string(), |s| s.to_string())
    ));
    s
}

#[derive(Debug, Clone, Serialize)]
struct SeedResult {
    seed: u64,
    config_hash: String,
    accuracy: f64,
    macro_f1: f64,
    residual_mean: f64,
    residual_sd: f64,
    lambda_p_final: f64,
    lambda_p_constant: bool,
    d: f64,
    rho: f64,
    k: f64,
}

#[derive(Debug, Clone, Serialize)]
struct RowResult {
    row: &'static str,
    status: String,
    accuracy: Option<f64>,
    macro_f1: Option<f64>,
    residual_mean: Option<f64>,
    lambda_p_final: Option<f64>,
    d: Option<f64>,
    rho: Option<f64>,
    k: Option<f64>,
    runs: Vec<SeedResult>,
}

#[derive(Serialize)]
struct AblationReport {
    config_hash: String,
    dataset_seed: u64,
    dataset_checksum: String,
    seeds: Vec<u64>,
    rows: Vec<RowResult>,
}

fn run_row(cfg: &RunConfig, row: AblationRow, ds: &Dataset, out: &Path) -> Result<Vec<SeedResult>, CliError> {
    let test = ds.split(Split::Test);
    let mut results = Vec::new();
    for &seed in &cfg.ablate.seeds {
        let mut run = cfg.clone();
        run.command = "train".into();
        run.ablation = row.ablation(&cfg.ablation, cfg.train.lambda.lambda0);
        run.train.seed = seed;
        run.ablation.apply(&mut run.train);
        let dir = out.join(row.name()).join(format!("seed-{seed}"));
        run.checkpoint_dir = Some(dir.clone());
        run.write_snapshot(&dir)?;
        let outcome = physnet::train::train(ds, &run.train)?;
        save_checkpoint(&dir, &outcome.spec, &outcome.params)?;
        write_log(&dir, &outcome.log)?;
        let m = evaluate(&outcome.params, &outcome.spec, &test, run.train.eval_batch_size)?;
        let lambdas: Vec<f64> = outcome.log.iter().map(|e| e.lambda_p).collect();
        results.push(SeedResult {
            seed,
            config_hash: run.hash(),
            accuracy: m.classification.accuracy,
            macro_f1: m.classification.macro_f1,
            residual_mean: m.residual_mean,
            residual_sd: m.residual_sd,
            lambda_p_final: lambdas.last().copied().unwrap_or(f64::NAN),
            lambda_p_constant: lambdas.windows(2).all(|w| w[0] == w[1]),
            d: m.d,
            rho: m.rho,
            k: m.k,
        });
    }
    Ok(results)
}

fn mean_of(runs: &[SeedResult], pick: impl Fn(&SeedResult) -> f64) -> Option<f64> {
    (!runs.is_empty()).then(|| runs.iter().map(pick).sum::<f64>() / runs.len() as f64)
}

pub fn ablate(mut cfg: RunConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    cfg.command = "ablate".into();
    if cfg.ablate.rows.is_empty() || cfg.ablate.seeds.is_empty() {
        return Err(CliError::Usage("ablate needs at least one row and one seed".into()));
    }
    let data = dir_or(data, &cfg.dataset_dir, "dataset");
    let out = dir_or(out, &cfg.report_dir, "ablate");
    let ds = load_dataset(&data)?;
    cfg.dataset_dir = Some(data);
    cfg.report_dir = Some(out.clone());
    fit_to_dataset(&mut cfg.train, &ds);
    cfg.train.validate()?;
    cfg.write_snapshot(&out)?;

    let mut rows = Vec::new();
    for &row in &cfg.ablate.rows {
        println!("training {} ({} seed(s))", row.name(), cfg.ablate.seeds.len());
        let r = match run_row(&cfg, row, &ds, &out) {
            Ok(runs) => RowResult {
                row: row.name(),
                status: "ok".into(),
                accuracy: mean_of(&runs, |r| r.accuracy),
                macro_f1: mean_of(&runs, |r| r.macro_f1),
                residual_mean: mean_of(&runs, |r| r.residual_mean),
                lambda_p_final: mean_of(&runs, |r| r.lambda_p_final),
                d: mean_of(&runs, |r| r.d),
                rho: mean_of(&runs, |r| r.rho),
                k: mean_of(&runs, |r| r.k),
                runs,
            },
            Err(e) => {
                eprintln!("row {} failed: {e}", row.name());
                RowResult {
                    row: row.name(),
                    status: format!("failed: {e}"),
                    accuracy: None,
                    macro_f1: None,
                    residual_mean: None,
                    lambda_p_final: None,
                    d: None,
                    rho: None,
                    k: None,
                    runs: Vec::new(),
                }
            }
        };
        rows.push(r);
    }
    let report = AblationReport {
        config_hash: cfg.hash(),
        dataset_seed: ds.manifest.seed,
        dataset_checksum: ds.manifest.checksum()?,
        seeds: cfg.ablate.seeds.clone(),
        rows,
    };
    write_json(&out.join("ablation.json"), &report)?;
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "row",
        "status",
        "accuracy",
        "macro_f1",
        "residual_mean",
        "lambda_p_final",
        "d",
        "rho",
        "k",
        "config_hash",
        "dataset_checksum",
    ])?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &report.rows {
        w.write_record([
            r.row.to_string(),
            r.status.clone(),
            cell(r.accuracy),
            cell(r.macro_f1),
            cell(r.residual_mean),
            cell(r.lambda_p_final),
            cell(r.d),
            cell(r.rho),
            cell(r.k),
            report.config_hash.clone(),
            report.dataset_checksum.clone(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    println!(
        "{:<13} {:>8} {:>8} {:>10} {:>9}  status",
        "row", "acc", "macroF1", "mean|R|", "lambda_p"
    );
    let show = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    for r in &report.rows {
        println!(
            "{:<13} {:>8} {:>8} {:>10} {:>9}  {}",
            r.row,
            show(r.accuracy, 4),
            show(r.macro_f1, 4),
            show(r.residual_mean, 5),
            show(r.lambda_p_final, 4),
            r.status
        );
    }
    println!("config {}  dataset {}", report.config_hash, report.dataset_checksum);
    let failed = report.rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} ablation row(s) failed")));
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckReport<'a> {
    config: &'a OracleConfig,
    checks: &'a [CheckOutcome],
    passed: bool,
}

pub fn check(oracle: OracleConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| report_root().join("check"));
    let checks = oracles::run_all(&oracle)?;
    for c in &checks {
        println!(
            "{} {:<40} {:>10.3e} (limit {:.1e})  {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.observed,
            c.limit,
            c.detail
        );
    }
    let worst = |prefix: &str| {
        checks
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| c.observed)
            .fold(0.0, f64::max)
    };
    println!(
        "max gradient error {:.3e}, front-speed error {:.3e}, logistic error {:.3e}",
        worst("grad"),
        worst("front speed"),
        worst("logistic")
    );
    let failed = checks.iter().filter(|c| !c.passed).count();
    write_json(
        &out.join("check.json"),
        &CheckReport {
            config: &oracle,
            checks: &checks,
            passed: failed == 0,
        },
    )?;
    if failed > 0 {
        for c in checks.iter().filter(|c| !c.passed) {
            eprintln!(
                "failed: {}: observed {:.6e}, expected <= {:.1e}",
                c.name, c.observed, c.limit
            );
        }
        return Err(CliError::CheckFailed(failed));
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
