use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use physnet::model::load_checkpoint;
use physnet::sim::{Dataset, Split};
use physnet::train::{evaluate, read_log, TrainConfig};
use serde_json::Value;

fn physnet(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physnet"))
        .args(args)
        .env("PHYSNET_REPORT_DIR", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn checksum_line(stdout: &str) -> String {
    stdout
        .lines()
        .find(|l| l.starts_with("manifest sha256"))
        .expect("checksum printed")
        .to_string()
}

/// A 16-sample desk-preset corpus under `root/dataset`.
fn small_corpus(root: &Path) {
    ok(&physnet(root, &["gen", "--preset", "desk", "--n", "4", "--seed", "7"]));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_is_reproducible_and_validates_its_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let a_dir = root.join("a");
    let b_dir = root.join("b");
    let args = ["gen", "--preset", "desk", "--n", "3", "--seed", "7", "--out"];
    let a = ok(&physnet(root, &[&args[..], &[a_dir.to_str().unwrap()]].concat()));
    let b = ok(&physnet(root, &[&args[..], &[b_dir.to_str().unwrap()]].concat()));
    assert_eq!(checksum_line(&a), checksum_line(&b));
    for class in ["glioma-like", "meningioma-like", "pituitary-like", "no-tumor"] {
        assert!(
            a.lines().any(|l| l.split_whitespace().next() == Some(class)),
            "{class} missing from\n{a}"
        );
    }
    assert!(a_dir.join("resolved_config.json").exists());

    let zero = physnet(root, &["gen", "--n", "0"]);
    assert_eq!(zero.status.code(), Some(1));
    let bad_flag = physnet(root, &["gen", "--bogus"]);
    assert_eq!(bad_flag.status.code(), Some(1));
}

#[test]
fn default_directories_follow_the_report_dir_variable() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    assert!(dir.path().join("dataset").join("manifest.json").exists());
}

#[test]
fn train_is_deterministic_and_honours_ablation_flags() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_corpus(root);
    let train = |out: &str, extra: &[&str]| {
        let out = root.join(out);
        let base = ["train", "--preset", "desk", "--epochs", "2", "--seed", "3", "--out"];
        let args = [&base[..], &[out.to_str().unwrap()], extra].concat();
        ok(&physnet(root, &args));
        out
    };
    let a = train("a", &[]);
    let b = train("b", &[]);
    for file in ["train_log.jsonl", "train_log.csv", "model.params"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }

    // The saved configuration replays the run.
    let replay = root.join("replay");
    let snapshot = a.join("resolved_config.json");
    ok(&physnet(
        root,
        &[
            "train",
            "--config",
            snapshot.to_str().unwrap(),
            "--out",
            replay.to_str().unwrap(),
        ],
    ));
    assert_eq!(
        fs::read(a.join("train_log.jsonl")).unwrap(),
        fs::read(replay.join("train_log.jsonl")).unwrap()
    );

    let off = train(
        "off",
        &["--disable-physics", "--disable-boundary", "--disable-temporal"],
    );
    let log = read_log(&off).unwrap();
    assert_eq!(log.len(), 2);
    for e in &log {
        assert_eq!((e.lambda_p, e.lambda_b, e.lambda_t), (0.0, 0.0, 0.0));
        assert_eq!(e.total, e.l_cls);
    }

    let nan = physnet(
        root,
        &[
            "train",
            "--preset",
            "desk",
            "--epochs",
            "2",
            "--batch-size",
            "2",
            "--lr",
            "1e200",
            "--out",
            root.join("nan").to_str().unwrap(),
        ],
    );
    assert_eq!(nan.status.code(), Some(2), "{}", String::from_utf8_lossy(&nan.stderr));

    let unknown = root.join("bad.json");
    fs::write(&unknown, r#"{"train": {"epochz": 1}}"#).unwrap();
    let bad = physnet(root, &["train", "--config", unknown.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn eval_reports_are_consistent_with_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_corpus(root);
    ok(&physnet(
        root,
        &["train", "--preset", "desk", "--epochs", "2", "--seed", "1"],
    ));
    let stdout = ok(&physnet(
        root,
        &["eval", "--preset", "desk", "--split", "train", "--finetune-steps", "20"],
    ));
    assert!(stdout.contains("residual |R|"), "{stdout}");

    let report_dir = root.join("eval");
    let report = read_json(&report_dir.join("metrics.json"));
    let metrics = &report["metrics"];

    let ds = Dataset::load(&root.join("dataset")).unwrap();
    let samples = ds.split(Split::Train);
    let (spec, params) = load_checkpoint(&root.join("train")).unwrap();
    let direct = evaluate(&params, &spec, &samples, TrainConfig::desk().eval_batch_size).unwrap();
    assert_eq!(metrics["residual_mean"].as_f64().unwrap(), direct.residual_mean);
    assert_eq!(
        metrics["classification"]["accuracy"].as_f64().unwrap(),
        direct.classification.accuracy
    );

    // Confusion rows sum to each class's support.
    let mut rdr = csv::Reader::from_path(report_dir.join("confusion.csv")).unwrap();
    let mut total = 0;
    for (class, rec) in rdr.records().enumerate() {
        let rec = rec.unwrap();
        let row: usize = rec.iter().skip(1).map(|v| v.parse::<usize>().unwrap()).sum();
        let support = samples.iter().filter(|s| s.entry.label == class).count();
        assert_eq!(row, support, "class {class}");
        total += row;
    }
    assert_eq!(total, samples.len());

    let classes = report["class_params"].as_array().unwrap();
    for name in ["glioma-like", "meningioma-like", "pituitary-like"] {
        let c = classes.iter().find(|c| c["class_name"] == name).expect(name);
        for key in ["d", "rho", "k"] {
            let v = c[key].as_f64().unwrap();
            assert!(v.is_finite() && v > 0.0, "{name} {key} = {v}");
        }
    }
    assert!(report_dir.join("class_params.csv").exists());
    assert!(report_dir.join("losses.csv").exists());
    let provenance = &report["provenance"];
    assert_eq!(provenance["dataset_seed"], 7);
    assert_eq!(provenance["train_seed"], 1);

    let missing = physnet(root, &["eval", "--checkpoint", root.join("nowhere").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn ablation_grid_shares_data_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_corpus(root);
    let stdout = ok(&physnet(
        root,
        &[
            "ablate",
            "--preset",
            "desk",
            "--epochs",
            "2",
            "--seeds",
            "2",
            "--rows",
            "full,no-physics,fixed-lambda",
        ],
    ));
    assert!(stdout.contains("fixed-lambda"), "{stdout}");
    let report = read_json(&root.join("ablate").join("ablation.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let row = |name: &str| rows.iter().find(|r| r["row"] == name).unwrap();
    for r in rows {
        assert_eq!(r["status"], "ok");
    }
    assert_eq!(row("fixed-lambda")["runs"][0]["lambda_p_constant"], true);
    assert_eq!(row("no-physics")["lambda_p_final"].as_f64(), Some(0.0));
    let full_r = row("full")["residual_mean"].as_f64().unwrap();
    let bare_r = row("no-physics")["residual_mean"].as_f64().unwrap();
    assert_ne!(full_r, bare_r);

    let mut rdr = csv::Reader::from_path(root.join("ablate").join("ablation.csv")).unwrap();
    let checksums: Vec<String> = rdr.records().map(|r| r.unwrap()[10].to_string()).collect();
    assert_eq!(checksums.len(), 3);
    assert!(checksums.iter().all(|c| *c == checksums[0]));

    // Every run of the grid saved a replayable configuration.
    for name in ["full", "no-physics", "fixed-lambda"] {
        assert!(root
            .join("ablate")
            .join(name)
            .join("seed-2")
            .join("resolved_config.json")
            .exists());
    }
}

#[test]
fn check_passes_at_defaults_and_fails_when_too_strict() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let stdout = ok(&physnet(root, &["check"]));
    assert!(stdout.contains("max gradient error"), "{stdout}");
    assert!(root.join("check").join("check.json").exists());

    let strict = physnet(root, &["check", "--grad-tol", "1e-12"]);
    assert_eq!(strict.status.code(), Some(3));
}
