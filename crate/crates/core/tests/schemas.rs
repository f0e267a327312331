//! The shipped schema files agree with what the code reads and writes.

use std::collections::BTreeSet;
use std::path::PathBuf;

use geowind_core::config::{preset, RunConfig};
use geowind_core::persist::{encode_dataset, DATASET_FILES, FORMAT_VERSION};
use geowind_core::pipeline::build_simulator;
use serde_json::Value;

fn doc(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs").join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

#[test]
fn csv_headers_match_the_dataset_schema() {
    let schema = doc("dataset-schema.json");
    assert_eq!(schema["format_version"], FORMAT_VERSION);
    let documented: BTreeSet<&str> = schema["files"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(documented, DATASET_FILES.iter().copied().collect());

    let mut cfg = preset("srw-f2").unwrap();
    cfg.paths = 3;
    cfg.horizon = 200;
    cfg.calibration.paths = 20;
    cfg.calibration.horizon = 200;
    let (sim, _) = build_simulator(&cfg, 1).unwrap();
    let ds = sim.batch_run(1).unwrap();
    for (name, bytes) in encode_dataset(&ds).unwrap() {
        let spec = &schema["files"][name];
        if spec["kind"] == "json" {
            let v: Value = serde_json::from_slice(&bytes).unwrap();
            let keys: BTreeSet<&String> = v.as_object().unwrap().keys().collect();
            let want: BTreeSet<&String> = spec["fields"].as_object().unwrap().keys().collect();
            assert_eq!(keys, want, "{name}");
            continue;
        }
        let header = String::from_utf8(bytes).unwrap().lines().next().unwrap().to_string();
        let want: Vec<&str> = spec["columns"].as_array().unwrap().iter().map(|c| c[0].as_str().unwrap()).collect();
        assert_eq!(header.split(',').collect::<Vec<_>>(), want, "{name}");
    }
}

#[test]
fn config_schema_lists_every_field() {
    let schema = doc("run-config.schema.json");
    let documented: BTreeSet<&String> = schema["properties"].as_object().unwrap().keys().collect();
    let cfg: RunConfig = preset("srw-f2").unwrap();
    let v = serde_json::to_value(&cfg).unwrap();
    let fields: BTreeSet<&String> = v.as_object().unwrap().keys().collect();
    assert_eq!(documented, fields);
    let required: BTreeSet<&str> = schema["required"].as_array().unwrap().iter().map(|k| k.as_str().unwrap()).collect();
    for key in &required {
        let mut obj = v.as_object().unwrap().clone();
        obj.remove(*key);
        assert!(RunConfig::parse(&Value::Object(obj).to_string()).is_err(), "{key} should be required");
    }
}
