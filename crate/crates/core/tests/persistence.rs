use geowind_core::config::{preset, PRESETS};
use geowind_core::persist::{dataset_digest, read_dataset, write_dataset, DATASET_FILES};
use geowind_core::pipeline::build_simulator;

fn small(name: &str) -> geowind_core::config::RunConfig {
    let mut c = preset(name).unwrap();
    c.paths = 60;
    c.horizon = c.horizon.min(800);
    c.calibration.paths = 60;
    c.calibration.horizon = c.calibration.horizon.min(800);
    if let Some(r) = &mut c.ray {
        r.times.retain(|&t| t <= 200.0);
        if r.times.is_empty() {
            r.times.push(100.0);
        }
    }
    for e in &mut c.exits {
        e.s = 10.0;
    }
    c
}

#[test]
fn every_preset_round_trips_exactly() {
    for name in PRESETS.iter().filter(|&&p| p != "all") {
        let cfg = small(name);
        let (sim, _) = build_simulator(&cfg, 2).unwrap();
        let ds = sim.batch_run(2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (digest, files) = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(files.len(), DATASET_FILES.len(), "{name}");
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds, "{name}");
        assert_eq!(back.winding_moments, ds.winding_moments, "{name}");
        assert_eq!(dataset_digest(&back).unwrap(), digest, "{name}");
    }
}

#[test]
fn worker_count_does_not_change_the_dataset() {
    let cfg = small("example-anu");
    let (sim, _) = build_simulator(&cfg, 1).unwrap();
    let a = sim.batch_run(1).unwrap();
    let b = sim.batch_run(4).unwrap();
    assert_eq!(dataset_digest(&a).unwrap(), dataset_digest(&b).unwrap());
}

#[test]
fn the_all_preset_is_not_a_run_config() {
    assert!(preset("all").is_err());
    assert!(preset("srw-f2").unwrap().validate().is_ok());
}
