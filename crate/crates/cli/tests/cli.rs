use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn otmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otmil"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = otmil(args);
    assert!(
        out.status.success(),
        "otmil {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Small normal-scheme dataset in `dir/gen`.
fn small_normal(dir: &Path) -> PathBuf {
    let out = dir.join("gen");
    ok(&[
        "gen",
        "--scheme",
        "normal",
        "--bags",
        "30",
        "--test-bags",
        "20",
        "--bag-size",
        "20",
        "--ratio",
        "0.10",
        "--seed",
        "3",
        "--out",
        path(&out),
    ]);
    out
}

#[test]
fn gen_normal_writes_files_and_manifest() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("g");
    ok(&[
        "gen",
        "--scheme",
        "normal",
        "--ratio",
        "0.10",
        "--bags",
        "200",
        "--seed",
        "7",
        "--out",
        path(&out),
    ]);
    assert!(out.join("train.ndjson").exists());
    assert!(out.join("test.ndjson").exists());
    assert!(out.join("config.json").exists());
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["ratio"], 0.10);
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["files"][0]["summary"]["bags"], 200);
    assert_eq!(
        fs::read_to_string(out.join("train.ndjson"))
            .unwrap()
            .lines()
            .count(),
        200
    );
}

#[test]
fn gen_is_byte_identical_on_rerun() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&[
            "gen",
            "--scheme",
            "hard",
            "--bags",
            "20",
            "--test-bags",
            "10",
            "--seed",
            "5",
            "--out",
            path(out),
        ]);
    }
    for f in [
        "train.ndjson",
        "test_normal.ndjson",
        "test_pos0.ndjson",
        "test_pos8.ndjson",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gen_hard_writes_four_splits() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("h");
    ok(&[
        "gen",
        "--scheme",
        "hard",
        "--bags",
        "20",
        "--test-bags",
        "10",
        "--out",
        path(&out),
    ]);
    let mut files: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|f| f.ends_with(".ndjson"))
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "test_normal.ndjson",
            "test_pos0.ndjson",
            "test_pos8.ndjson",
            "train.ndjson"
        ]
    );
}

#[test]
fn invalid_ratio_fails_with_marker() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bad");
    let res = otmil(&["gen", "--ratio", "1.5", "--out", path(&out)]);
    assert!(!res.status.success());
    assert!(out.join(".failed").exists());
    assert!(!out.join("train.ndjson").exists());
}

#[test]
fn train_defaults_write_outputs() {
    let dir = TempDir::new().unwrap();
    let data = small_normal(dir.path());
    let out = dir.path().join("t");
    ok(&[
        "train",
        "--data",
        path(&data.join("train.ndjson")),
        "--out",
        path(&out),
    ]);
    let summary = json(&out.join("summary.json"));
    assert!(summary["instance_auc"].is_number());
    assert_eq!(summary["seed"], 0);
    assert!(out.join("checkpoint.json").exists());
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "epoch,mu_t,loss,pseudo_precision,pseudo_accuracy,instance_auc,bag_auc,converged\n"
    ));
    assert_eq!(metrics.lines().count(), 31);
    assert!(!out.join(".failed").exists());
}

#[test]
fn no_constrain_flags_degeneration() {
    let dir = TempDir::new().unwrap();
    let data = small_normal(dir.path());
    let out = dir.path().join("nc");
    ok(&[
        "train",
        "--data",
        path(&data.join("train.ndjson")),
        "--no-constrain",
        "--hard-labels",
        "--no-adaptive-mu",
        "--lr",
        "0.01",
        "--hidden",
        "32",
        "--epochs",
        "10",
        "--out",
        path(&out),
    ]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["degenerate"], true);
    assert!(summary["final_positive_fraction"].as_f64().unwrap() < 0.01);
}

#[test]
fn warmup_starts_at_one_half() {
    let dir = TempDir::new().unwrap();
    let data = small_normal(dir.path());
    let out = dir.path().join("mu");
    ok(&[
        "train",
        "--data",
        path(&data.join("train.ndjson")),
        "--mu",
        "0.15",
        "--warmup-T",
        "10",
        "--epochs",
        "12",
        "--hidden",
        "8",
        "--out",
        path(&out),
    ]);
    let rows = csv_rows(&out.join("metrics.csv"));
    assert_eq!(rows[0][0], "0");
    assert_eq!(rows[0][1], "0.5");
    assert_eq!(rows[10][1], "0.15");
}

#[test]
fn eval_scores_checkpoint_and_rejects_missing_one() {
    let dir = TempDir::new().unwrap();
    let data = small_normal(dir.path());
    let run = dir.path().join("t");
    ok(&[
        "train",
        "--data",
        path(&data.join("train.ndjson")),
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--out",
        path(&run),
    ]);
    let out = dir.path().join("e");
    ok(&[
        "eval",
        "--checkpoint",
        path(&run.join("checkpoint.json")),
        "--data",
        path(&data.join("test.ndjson")),
        "--out",
        path(&out),
    ]);
    let eval = json(&out.join("eval.json"));
    assert!(eval["metrics"]["instance_auc"].is_number());

    let missing = dir.path().join("m");
    let res = otmil(&[
        "eval",
        "--checkpoint",
        path(&dir.path().join("nope.json")),
        "--data",
        path(&data.join("test.ndjson")),
        "--out",
        path(&missing),
    ]);
    assert!(!res.status.success());
    assert!(missing.join(".failed").exists());
}

#[test]
fn mil_violation_fails_before_training() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.ndjson");
    fs::write(
        &bad,
        concat!(
            r#"{"bag_id":"a","label":1,"instances":[{"features":[1.0],"label":1}]}"#,
            "\n",
            r#"{"bag_id":"b","label":0,"instances":[{"features":[0.0],"label":1}]}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("t");
    let res = otmil(&["train", "--data", path(&bad), "--out", path(&out)]);
    assert!(!res.status.success());
    assert!(out.join(".failed").exists());
    assert!(!out.join("checkpoint.json").exists());
}

#[test]
fn sweep_emits_one_row_per_grid_point() {
    let dir = TempDir::new().unwrap();
    let data = small_normal(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "sweep",
            "--data",
            path(&data.join("train.ndjson")),
            "--mu-grid",
            "0.10,0.15,0.20,0.25",
            "--epochs",
            "3",
            "--hidden",
            "8",
            "--jobs",
            "3",
            "--seed",
            "4",
            "--out",
            path(&out),
        ]);
        out
    };
    let a = run("s1");
    let rows = csv_rows(&a.join("sweep.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[2] == "4" && r[1] == "10"));
    assert_eq!(rows.iter().filter(|r| r[9] == "true").count(), 1);
    let mus: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(mus, ["0.1", "0.15", "0.2", "0.25"]);
    let summary = json(&a.join("summary.json"));
    assert!(summary["best"]["mu"].is_number());

    let b = run("s2");
    assert_eq!(
        fs::read(a.join("sweep.csv")).unwrap(),
        fs::read(b.join("sweep.csv")).unwrap()
    );
}

#[test]
fn ablation_emits_four_rows_in_order() {
    let dir = TempDir::new().unwrap();
    let data = small_normal(dir.path());
    let out = dir.path().join("a");
    ok(&[
        "ablation",
        "--data",
        path(&data.join("train.ndjson")),
        "--epochs",
        "2",
        "--hidden",
        "8",
        "--out",
        path(&out),
    ]);
    let flags: Vec<String> = csv_rows(&out.join("ablation.csv"))
        .iter()
        .map(|r| r[..3].join(","))
        .collect();
    assert_eq!(
        flags,
        [
            "false,false,false",
            "true,false,false",
            "true,true,false",
            "true,true,true"
        ]
    );
}

#[test]
fn baseline_reports_each_test_split() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("h");
    ok(&[
        "gen",
        "--scheme",
        "hard",
        "--bags",
        "20",
        "--test-bags",
        "10",
        "--bag-size",
        "20",
        "--out",
        path(&data),
    ]);
    let out = dir.path().join("b");
    ok(&[
        "baseline",
        "--kind",
        "attention",
        "--data",
        path(&data.join("train.ndjson")),
        "--test",
        path(&data.join("test_pos0.ndjson")),
        "--test",
        path(&data.join("test_pos8.ndjson")),
        "--epochs",
        "2",
        "--out",
        path(&out),
    ]);
    let rows = csv_rows(&out.join("baseline.csv"));
    let splits: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(splits, ["train", "test_pos0", "test_pos8"]);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().is_ok()));
    assert!(out.join("model.json").exists());
}

#[test]
fn entropy_grid_has_64_by_99_rows() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("h");
    ok(&[
        "entropy",
        "--K",
        "1..64",
        "--p-steps",
        "99",
        "--out",
        path(&out),
    ]);
    let text = fs::read_to_string(out.join("entropy.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("K,p,h_instance,h_bag,difference"));
    let diffs: Vec<f64> = lines
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(diffs.len(), 64 * 99);
    assert!(diffs.iter().all(|&d| d >= 0.0));
}

#[test]
fn config_echo_records_flags() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("h");
    ok(&[
        "entropy",
        "--K",
        "2,3",
        "--p-steps",
        "3",
        "--seed",
        "9",
        "--out",
        path(&out),
    ]);
    let cfg = json(&out.join("config.json"));
    assert_eq!(cfg["global"]["seed"], 9);
    assert_eq!(cfg["command"]["command"], "entropy");
    assert_eq!(cfg["command"]["k"], "2,3");
}
