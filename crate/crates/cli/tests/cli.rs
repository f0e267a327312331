use std::path::Path;
use std::process::{Command, Output};

fn geowind(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geowind")).args(args).env_remove("GEOWIND_WORKERS").output().expect("spawn geowind")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"{
  "name": "small",
  "model": { "tree": { "rank": 2 } },
  "measure": { "atoms": [
    { "word": "u", "prob": 0.25 }, { "word": "U", "prob": 0.25 },
    { "word": "v", "prob": 0.25 }, { "word": "V", "prob": 0.25 }
  ] },
  "horizon": 400,
  "paths": 120,
  "seed": 7,
  "stopping": { "thresholds": [20, 40], "lambda_ref": 0.5 },
  "references": ["u", "v"],
  "ray": { "times": [100, 200] },
  "exits": [ { "functional": [1, 0], "k": 1, "l": 1, "s": 10 } ],
  "calibration": { "horizon": 400, "paths": 100 },
  "tests": ["lambda", "lln", "gambler_ruin"]
}"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn stages_run_in_order_and_report_writes_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = geowind(&["simulate", "--config", &cfg, "--out", out_s, "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = geowind(&["estimate", "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("lambda"));
    let o = geowind(&["test", "--out", out_s]);
    assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stderr(&o));
    assert!(stdout(&o).contains("gambler_ruin_k1_l1"));
    let o = geowind(&["report", "--out", out_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["report.txt", "trajectories.svg", "clt_histograms.svg", "exit_probability.svg", "manifest.json", "dataset/paths.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn report_before_tests_is_a_stage_order_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let o = geowind(&["report", "--out", out_s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(geowind(&["simulate", "--config", &cfg, "--out", out_s]).status.success());
    let o = geowind(&["report", "--out", out_s]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("estimate"), "{}", stderr(&o));
    let o = geowind(&["test", "--out", out_s]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_digests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let mut manifests = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "3")] {
        let out = dir.path().join(name);
        let out_s = out.to_str().unwrap();
        let o = geowind(&["test", "--config", &cfg, "--out", out_s, "--workers", workers]);
        assert!(matches!(o.status.code(), Some(0 | 1)), "{}", stderr(&o));
        let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        let digests: Vec<_> = ["simulate", "estimate", "test"].iter().map(|s| m["stages"][s]["digest"].clone()).collect();
        manifests.push((m["config_digest"].clone(), digests));
        assert_eq!(std::fs::read(out.join("reports.json")).unwrap(), std::fs::read(dir.path().join("a/reports.json")).unwrap());
    }
    assert_eq!(manifests[0], manifests[1]);

    let out = dir.path().join("c");
    let o = geowind(&["test", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "8"]);
    assert!(matches!(o.status.code(), Some(0 | 1)));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_ne!(m["stages"]["simulate"]["digest"], manifests[0].1[0]);
}

#[test]
fn certify_example_measure() {
    let o = geowind(&["certify", "--preset", "example-anu"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cert: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(cert["verdict"], "Nondegenerate");
    assert_eq!(cert["witness"].as_array().unwrap().len(), 3);
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = SMALL.replacen("\"prob\": 0.25", "\"prob\": -0.25", 1);
    let o = geowind(&["simulate", "--config", &write_config(dir.path(), &bad), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("measure.atoms[0].prob"), "{}", stderr(&o));

    let unknown = SMALL.replacen("\"seed\": 7", "\"seed\": 7, \"colour\": 1", 1);
    let o = geowind(&["certify", "--config", &write_config(dir.path(), &unknown)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));

    let o = geowind(&["certify", "--preset", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn acceptance_preset_rejects_path_overrides() {
    let o = geowind(&["test", "--preset", "all", "--paths", "10"]);
    assert_eq!(o.status.code(), Some(2));
}
