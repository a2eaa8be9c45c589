use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_recal");

fn recal(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn recal")
}

fn ok(args: &[&str]) -> Output {
    let out = recal(args);
    assert!(
        out.status.success(),
        "recal {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_spec(dir: &Path, spread_scale: f64) -> PathBuf {
    let spec = serde_json::json!({
        "format_version": 1,
        "d_in": 4,
        "classes": 3,
        "means": [[3.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0], [0.0, 0.0, 3.0, 0.0]],
        "spread": [1.0, 1.0, 1.0],
        "counts": {"train": 60, "val": 24, "test_i": 24, "test_ii": 24},
        "shift": {"offset": [0.5, 0.5, 0.0, 0.0], "spread_scale": spread_scale},
        "seed": 5
    });
    let p = dir.join("spec.json");
    fs::write(&p, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    p
}

fn small_run(dir: &Path, epochs: usize) -> PathBuf {
    small_spec(dir, 1.25);
    let cfg = serde_json::json!({
        "format_version": 1,
        "model": {"d_in": 4, "hidden": [6], "embed_dim": 3, "classes": 3, "merge": "concat"},
        "schedule": {"epochs": epochs},
        "data": {"spec_path": "spec.json"},
        "batch_size": 16,
        "seed": 1
    });
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_four_csvs_and_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path(), 1.25);
    let out = dir.path().join("data");
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&out)]);
    for name in ["train.csv", "val.csv", "test_i.csv", "test_ii.csv"] {
        assert!(out.join(name).is_file(), "{name}");
    }
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["files"]["train"]["rows"], 60);
    assert_eq!(
        m["files"]["test_ii"]["class_counts"],
        serde_json::json!([8, 8, 8])
    );
    assert_eq!(m["spec"]["shift"]["spread_scale"], 1.25);

    let again = dir.path().join("again");
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&again)]);
    for name in [
        "train.csv",
        "val.csv",
        "test_i.csv",
        "test_ii.csv",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(out.join(name)).unwrap(),
            fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn gen_data_names_the_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    for gamma in [0.0, -1.0] {
        let spec = small_spec(dir.path(), gamma);
        let o = recal(&[
            "gen-data",
            "--spec",
            s(&spec),
            "--out",
            s(&dir.path().join("x")),
        ]);
        assert!(!o.status.success());
        assert!(stderr(&o).contains("shift.spread_scale"), "{}", stderr(&o));
    }
    assert!(!dir.path().join("x").exists());
}

#[test]
fn train_writes_report_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 3);
    let out = dir.path().join("out");
    ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    let r = read_json(&out.join("report.json"));
    for split in ["val", "testI", "testII"] {
        for key in [
            "accuracy",
            "precision_macro",
            "recall_macro",
            "f1_macro",
            "kappa_quadratic",
            "n_samples",
            "per_class",
        ] {
            assert!(!r["metrics"][split][key].is_null(), "{split}.{key}");
        }
    }
    let drop = r["drop_testI_to_testII"].as_f64().unwrap();
    let want = r["metrics"]["testI"]["accuracy"].as_f64().unwrap()
        - r["metrics"]["testII"]["accuracy"].as_f64().unwrap();
    assert_eq!(drop, want);
    assert_eq!(r["seed"], 1);
    assert_eq!(r["config"]["model"]["merge"], "concat");
    assert_eq!(r["train"]["epochs_run"], 3);
    assert!(out.join("timings.json").is_file());
    assert!(out.join("checkpoints/best.json").is_file());
    assert!(out.join("checkpoints/final.json").is_file());
}

#[test]
fn train_is_byte_identical_across_runs_and_seed_changes_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 2);
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    ok(&["train", "--config", s(&cfg), "--out", s(&a), "--seed", "7"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b), "--seed", "7"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&c), "--seed", "8"]);
    let ra = fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.json")).unwrap());
    assert_eq!(
        fs::read(a.join("checkpoints/best.json")).unwrap(),
        fs::read(b.join("checkpoints/best.json")).unwrap()
    );
    let (va, vc) = (
        read_json(&a.join("report.json")),
        read_json(&c.join("report.json")),
    );
    assert_ne!(va, vc);
    assert_eq!(va["seed"], 7);
    assert_eq!(vc["seed"], 8);
    let keys = |v: &Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&va), keys(&vc));
}

#[test]
fn train_names_a_missing_data_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "format_version": 1,
        "model": {"d_in": 4, "embed_dim": 3, "classes": 3, "merge": "add"},
        "data": {"csv": {"train": "nowhere/train.csv", "val": "v.csv", "test_i": "a.csv", "test_ii": "b.csv"}}
    });
    let p = dir.path().join("run.json");
    fs::write(&p, cfg.to_string()).unwrap();
    let o = recal(&[
        "train",
        "--config",
        s(&p),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nowhere/train.csv"), "{}", stderr(&o));
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 1);
    let mut v = read_json(&cfg);
    v["learning_rate"] = serde_json::json!(0.1);
    fs::write(&cfg, v.to_string()).unwrap();
    let o = recal(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn train_from_csv_matches_train_from_spec() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 2);
    ok(&[
        "gen-data",
        "--spec",
        s(&dir.path().join("spec.json")),
        "--out",
        s(&dir.path().join("data")),
    ]);
    let mut v = read_json(&cfg);
    v["data"] = serde_json::json!({"csv": {
        "train": "data/train.csv", "val": "data/val.csv",
        "test_i": "data/test_i.csv", "test_ii": "data/test_ii.csv"
    }});
    let csv_cfg = dir.path().join("csv_run.json");
    fs::write(&csv_cfg, v.to_string()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["train", "--config", s(&csv_cfg), "--out", s(&b)]);
    let (ra, rb) = (
        read_json(&a.join("report.json")),
        read_json(&b.join("report.json")),
    );
    assert_eq!(ra["metrics"], rb["metrics"]);
    assert_eq!(ra["train"], rb["train"]);
}

#[test]
fn eval_reproduces_the_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let ck = golden("checkpoint.json");
    let before = fs::read(&ck).unwrap();
    for name in ["one.json", "two.json"] {
        let out = dir.path().join(name);
        ok(&[
            "eval",
            "--checkpoint",
            s(&ck),
            "--data",
            s(&golden("data.csv")),
            "--report",
            s(&out),
        ]);
        assert_eq!(
            fs::read_to_string(&out).unwrap(),
            fs::read_to_string(golden("report.json")).unwrap()
        );
    }
    assert_eq!(fs::read(&ck).unwrap(), before);

    let r = read_json(&golden("report.json"));
    let cm: Vec<Vec<u64>> = serde_json::from_value(r["confusion"]["counts"].clone()).unwrap();
    let n: u64 = cm.iter().flatten().sum();
    let hits: u64 = (0..cm.len()).map(|i| cm[i][i]).sum();
    assert_eq!(n, 24);
    assert_eq!(r["accuracy"].as_f64().unwrap(), hits as f64 / n as f64);
}

#[test]
fn eval_refuses_data_of_the_wrong_width() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("wide.csv");
    fs::write(&data, "f0,f1,f2,f3,f4,label\n1,2,3,4,5,0\n").unwrap();
    let report = dir.path().join("r.json");
    let o = recal(&[
        "eval",
        "--checkpoint",
        s(&golden("checkpoint.json")),
        "--data",
        s(&data),
        "--report",
        s(&report),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("d_in = 4"), "{}", stderr(&o));
    assert!(!report.exists());
}

#[test]
fn eval_reports_a_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = recal(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("none.json")),
        "--data",
        s(&golden("data.csv")),
        "--report",
        s(&dir.path().join("r.json")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("none.json"), "{}", stderr(&o));
}

#[test]
fn centroids_dump_has_one_row_per_class() {
    let o = ok(&["centroids", "--checkpoint", s(&golden("checkpoint.json"))]);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 1 + 3);
    assert!(rows[0].starts_with("class\tcount\te0"));
    assert!(text.contains("# epoch_stamp"));
}

#[test]
fn ablate_two_variants_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 2);
    let out = dir.path().join("ab");
    ok(&[
        "ablate",
        "--config",
        s(&cfg),
        "--variants",
        "concat,backbone_only",
        "--seeds",
        "1",
        "--out",
        s(&out),
    ]);
    let t = read_json(&out.join("ablation.json"));
    let rows = t["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["variant"], "concat");
    assert_eq!(rows[1]["variant"], "backbone_only");
    assert_eq!(rows[0]["drop_testI_to_testII"]["sd"], 0.0);
    assert!(out.join("ablation.md").is_file());
}

#[test]
fn ablate_three_seeds_gives_mean_and_sd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 1);
    let out = dir.path().join("ab");
    ok(&[
        "ablate",
        "--config",
        s(&cfg),
        "--variants",
        "add",
        "--seeds",
        "3",
        "--out",
        s(&out),
    ]);
    let t = read_json(&out.join("ablation.json"));
    assert_eq!(t["seeds"], serde_json::json!([1, 2, 3]));
    let row = &t["rows"][0];
    assert_eq!(row["runs"], 3);
    let accs: Vec<f64> = t["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["testI_accuracy"].as_f64().unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / 3.0;
    let sd = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((row["testI"]["accuracy"]["mean"].as_f64().unwrap() - mean).abs() < 1e-15);
    assert!((row["testI"]["accuracy"]["sd"].as_f64().unwrap() - sd).abs() < 1e-15);
}

#[test]
fn ablate_rejects_an_unknown_variant_at_parse() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path(), 1);
    let out = dir.path().join("ab");
    let o = recal(&[
        "ablate",
        "--config",
        s(&cfg),
        "--variants",
        "concat,mul",
        "--out",
        s(&out),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("mul"), "{}", stderr(&o));
    assert!(!out.exists());
}
