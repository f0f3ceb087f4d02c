use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn dsu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsu"))
        .args(args)
        .env_remove("DSU_SELFTEST_INJECT_FAULT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small enough to train in well under a second.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "schema_version": "1",
  "dataset": {{"seed": 3, "classes": 4, "n_per_class": 6, "image_size": 16}},
  "network": {{"image_size": 16, "num_classes": 4, "insert_positions": [0, 1, 2, 3]}},
  "training": {{"epochs": 1, "batch_size": 8}},
  "output_dir": {out}
  {extra}
}}"#,
        out = serde_json::to_string(&dir.join("out")).unwrap()
    );
    fs::write(&path, text).unwrap();
    path
}

fn only_run_dir(root: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

fn metrics(report: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_clock_secs");
    v
}

#[test]
fn generate_data_writes_domains_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let c = cfg.to_str().unwrap();
    let o = dsu(&["generate-data", "--config", c]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("out");
    for name in ["photo", "art", "cartoon", "sketch"] {
        assert!(out.join(format!("{name}.images.bin")).exists());
        assert!(out.join(format!("{name}.labels.bin")).exists());
    }
    assert!(out.join("manifest.json").exists());

    let again = dsu(&["generate-data", "--config", c]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).starts_with("error:"));
    assert!(dsu(&["generate-data", "--config", c, "--force"]).status.success());
}

#[test]
fn corrupted_manifest_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let c = cfg.to_str().unwrap();
    assert!(dsu(&["generate-data", "--config", c]).status.success());
    let data = tmp.path().join("out");
    let mp = data.join("manifest.json");
    let text = fs::read_to_string(&mp).unwrap().replacen("\"image_size\"", "\"image_sise\"", 1);
    fs::write(&mp, text).unwrap();

    let cfg2 = tmp.path().join("train.json");
    fs::write(
        &cfg2,
        format!(
            r#"{{"schema_version":"1","dataset":{{"path":{}}},"output_dir":{}}}"#,
            serde_json::to_string(&data).unwrap(),
            serde_json::to_string(&tmp.path().join("runs")).unwrap()
        ),
    )
    .unwrap();
    let o = dsu(&["train", "--config", cfg2.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("image_sise"), "{}", stderr(&o));
}

#[test]
fn train_is_deterministic_and_reports_accuracies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let c = cfg.to_str().unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = dsu(&["train", "--config", c, "--aug", "identity", "--seed", "7", "--output-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(only_run_dir(&out).join("report.json"));
    }
    assert_eq!(metrics(&reports[0]), metrics(&reports[1]));
    let m = metrics(&reports[0]);
    assert_eq!(m["seed"], 7);
    assert!(m["out_of_domain_accuracy"].as_f64().is_some());

    let out = tmp.path().join("dsu");
    let o = dsu(&["train", "--config", c, "--aug", "dsu", "--p", "0.5", "--output-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = only_run_dir(&out);
    let m = metrics(&run.join("report.json"));
    assert!((0.0..=1.0).contains(&m["out_of_domain_accuracy"].as_f64().unwrap()));
    let shift: Value = serde_json::from_str(&fs::read_to_string(run.join("shift.json")).unwrap()).unwrap();
    assert!(shift["mu_dist"].as_f64().unwrap() >= 0.0);
}

#[test]
fn invalid_values_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let c = cfg.to_str().unwrap();
    let o = dsu(&["train", "--config", c, "--p", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    assert!(stderr(&o).contains("p"));

    let o = dsu(&["train", "--config", c, "--aug", "dropout"]);
    assert_eq!(o.status.code(), Some(1));
    let o = dsu(&["train", "--config", c, "--set", "training.epoch=2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("training.epoch"));
    let o = dsu(&["train", "--config", c, "--held-out", "nowhere"]);
    assert_eq!(o.status.code(), Some(1));

    fs::write(&cfg, r#"{"schema_version":"1","trainig":{}}"#).unwrap();
    let o = dsu(&["train", "--config", c]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("trainig"));
}

#[test]
fn method_sweep_covers_every_augmentor() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), r#", "sweep": {"kind": "method", "seeds": [0, 1]}"#);
    let o = dsu(&["ablate", "--config", cfg.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = only_run_dir(&tmp.path().join("out"));
    let rows = fs::read_to_string(run.join("rows.csv")).unwrap();
    for kind in ["identity", "dsu", "mix_style", "p_ada_in", "random_fixed", "uniform_shift", "channel_share_dsu"] {
        assert_eq!(rows.lines().filter(|l| l.contains(&format!(",{kind},{kind},"))).count(), 2, "{kind}");
    }
    let plot = fs::read_to_string(run.join("plot.csv")).unwrap();
    assert!(plot.starts_with('#'));
    assert_eq!(plot.lines().count(), 2 + 7);
}

#[test]
fn p_sweep_has_one_row_per_value_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), r#", "sweep": {"p_values": [0.0, 0.5, 1.0], "seeds": [4, 5]}"#);
    let o = dsu(&["ablate", "--config", cfg.to_str().unwrap(), "--sweep", "p"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = only_run_dir(&tmp.path().join("out"));
    let rows = fs::read_to_string(run.join("rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 6);
}

#[test]
fn unknown_sweep_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let o = dsu(&["ablate", "--config", cfg.to_str().unwrap(), "--sweep", "depth"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("depth"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = dsu(&["train", "--learning-rate", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn selftest_passes_and_detects_injected_fault() {
    let o = dsu(&["selftest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{out}");

    let o = Command::new(env!("CARGO_BIN_EXE_dsu"))
        .arg("selftest")
        .env("DSU_SELFTEST_INJECT_FAULT", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL statistics oracle"));
}
