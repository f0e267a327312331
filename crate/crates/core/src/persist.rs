//! Dataset directories (CSV + JSON), digests and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::group::AbelianVector;
use crate::walk::{Checkpoint, Dataset, ExitRecord, ExitSide, PathRecord, RayRecord, RayWinding, SimConfig, StopHit};

pub const FORMAT_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DATASET_FILES: &[&str] = &["dataset.json", "paths.csv", "checkpoints.csv", "stops.csv", "rays.csv", "exits.csv"];
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    config: SimConfig,
    dim: usize,
    tree: bool,
    paths: usize,
}

fn join_ints<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn side_name(s: ExitSide) -> &'static str {
    match s {
        ExitSide::Upper => "upper",
        ExitSide::Lower => "lower",
        ExitSide::Censored => "censored",
    }
}

/// Serializes a dataset into its files, in [`DATASET_FILES`] order.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let header =
        DatasetHeader { format_version: FORMAT_VERSION, config: ds.config.clone(), dim: ds.dim, tree: ds.tree, paths: ds.paths.len() };
    let mut header_bytes = serde_json::to_vec_pretty(&header)?;
    header_bytes.push(b'\n');

    let mut paths = csv::Writer::from_writer(Vec::new());
    paths.write_record(["path", "seed", "horizon", "partial", "max_tracking", "ray_confirmed_at", "ray_angle"])?;
    let mut cps = csv::Writer::from_writer(Vec::new());
    cps.write_record(["path", "step", "length", "winding", "ref_products"])?;
    let mut stops = csv::Writer::from_writer(Vec::new());
    stops.write_record(["path", "threshold", "tau", "length", "winding", "tracking"])?;
    let mut rays = csv::Writer::from_writer(Vec::new());
    rays.write_record(["path", "t", "winding"])?;
    let mut exits = csv::Writer::from_writer(Vec::new());
    exits.write_record(["path", "spec", "side", "time"])?;

    for p in &ds.paths {
        let i = p.index.to_string();
        paths.write_record([
            i.clone(),
            p.seed.to_string(),
            p.horizon.to_string(),
            p.partial.to_string(),
            opt(p.max_tracking),
            opt(p.ray.as_ref().and_then(|r| r.confirmed_at_horizon)),
            opt(p.ray.as_ref().and_then(|r| r.angle)),
        ])?;
        for c in &p.checkpoints {
            cps.write_record([i.clone(), c.step.to_string(), c.length.to_string(), join_ints(&c.winding.0), join_ints(&c.ref_products)])?;
        }
        for s in &p.stops {
            stops.write_record([
                i.clone(),
                s.threshold.to_string(),
                opt(s.tau),
                s.length.map_or(String::new(), |l| l.to_string()),
                join_ints(&s.winding.0),
                opt(s.tracking),
            ])?;
        }
        if let Some(r) = &p.ray {
            for w in &r.windings {
                rays.write_record([i.clone(), w.t.to_string(), join_ints(&w.winding.0)])?;
            }
        }
        for e in &p.exits {
            exits.write_record([i.clone(), e.spec_index.to_string(), side_name(e.side).to_string(), e.time.to_string()])?;
        }
    }
    let finish = |w: csv::Writer<Vec<u8>>| w.into_inner().map_err(|e| Error::Io(e.into_error()));
    Ok(vec![
        ("dataset.json", header_bytes),
        ("paths.csv", finish(paths)?),
        ("checkpoints.csv", finish(cps)?),
        ("stops.csv", finish(stops)?),
        ("rays.csv", finish(rays)?),
        ("exits.csv", finish(exits)?),
    ])
}

/// Digest of a dataset: SHA-256 over `name:sha256(file)` lines.
pub fn digest_files(files: &[(&str, Vec<u8>)]) -> (String, BTreeMap<String, String>) {
    let per_file: BTreeMap<String, String> = files.iter().map(|(n, b)| (n.to_string(), sha256_hex(b))).collect();
    let joined: String = per_file.iter().map(|(n, d)| format!("{n}:{d}\n")).collect();
    (sha256_hex(joined.as_bytes()), per_file)
}

pub fn dataset_digest(ds: &Dataset) -> Result<String> {
    Ok(digest_files(&encode_dataset(ds)?).0)
}

/// Writes the dataset files into `dir`; returns the dataset digest and the
/// per-file digests.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(String, BTreeMap<String, String>)> {
    fs::create_dir_all(dir)?;
    let files = encode_dataset(ds)?;
    for (name, bytes) in &files {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(digest_files(&files))
}

fn parse_err(file: &str, line: u64, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{file}:{line}: {msg}"))
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, file: &str) -> Result<&'a str> {
    rec.get(i).ok_or_else(|| parse_err(file, rec.position().map_or(0, |p| p.line()), format!("missing column {i}")))
}

fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, file: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let s = field(rec, i, file)?;
    s.parse().map_err(|e| parse_err(file, rec.position().map_or(0, |p| p.line()), format!("column {i} `{s}`: {e}")))
}

fn opt_num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, file: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if field(rec, i, file)?.is_empty() {
        Ok(None)
    } else {
        num(rec, i, file).map(Some)
    }
}

fn ints<T: std::str::FromStr>(s: &str, file: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|x| x.parse().map_err(|e| parse_err(file, 0, format!("`{x}`: {e}")))).collect()
}

fn records(dir: &Path, name: &str) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(dir.join(name))?;
    r.records().map(|x| x.map_err(Error::from)).collect()
}

fn path_slot<'a>(paths: &'a mut [PathRecord], rec: &csv::StringRecord, file: &str) -> Result<&'a mut PathRecord> {
    let i: usize = num(rec, 0, file)?;
    let n = paths.len();
    paths.get_mut(i).ok_or_else(|| parse_err(file, rec.position().map_or(0, |p| p.line()), format!("path {i} out of range {n}")))
}

/// Loads a dataset directory written by [`write_dataset`]. The winding
/// moments are recomputed from the loaded checkpoints.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let header: DatasetHeader = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Parse(format!("dataset format {} (expected {FORMAT_VERSION})", header.format_version)));
    }
    let ray_enabled = header.config.ray.is_some();
    let mut paths = Vec::with_capacity(header.paths);
    for rec in records(dir, "paths.csv")? {
        let f = "paths.csv";
        let index: usize = num(&rec, 0, f)?;
        if index != paths.len() {
            return Err(parse_err(f, rec.position().map_or(0, |p| p.line()), "paths out of order"));
        }
        paths.push(PathRecord {
            index,
            seed: num(&rec, 1, f)?,
            horizon: num(&rec, 2, f)?,
            checkpoints: Vec::new(),
            stops: Vec::new(),
            partial: num(&rec, 3, f)?,
            ray: ray_enabled
                .then(|| -> Result<RayRecord> {
                    Ok(RayRecord { confirmed_at_horizon: opt_num(&rec, 5, f)?, angle: opt_num(&rec, 6, f)?, windings: Vec::new() })
                })
                .transpose()?,
            max_tracking: opt_num(&rec, 4, f)?,
            exits: Vec::new(),
        });
    }
    if paths.len() != header.paths {
        return Err(Error::Parse(format!("paths.csv has {} rows, header says {}", paths.len(), header.paths)));
    }
    for rec in records(dir, "checkpoints.csv")? {
        let f = "checkpoints.csv";
        let c = Checkpoint {
            step: num(&rec, 1, f)?,
            length: num(&rec, 2, f)?,
            winding: AbelianVector(ints(field(&rec, 3, f)?, f)?),
            ref_products: ints(field(&rec, 4, f)?, f)?,
        };
        path_slot(&mut paths, &rec, f)?.checkpoints.push(c);
    }
    for rec in records(dir, "stops.csv")? {
        let f = "stops.csv";
        let tau: Option<u64> = opt_num(&rec, 2, f)?;
        let s = StopHit {
            threshold: num(&rec, 1, f)?,
            tau,
            length: opt_num(&rec, 3, f)?,
            winding: AbelianVector(ints(field(&rec, 4, f)?, f)?),
            tracking: opt_num(&rec, 5, f)?,
        };
        path_slot(&mut paths, &rec, f)?.stops.push(s);
    }
    for rec in records(dir, "rays.csv")? {
        let f = "rays.csv";
        let w = RayWinding { t: num(&rec, 1, f)?, winding: AbelianVector(ints(field(&rec, 2, f)?, f)?) };
        let p = path_slot(&mut paths, &rec, f)?;
        p.ray.as_mut().ok_or_else(|| Error::Parse("rays.csv rows without ray config".into()))?.windings.push(w);
    }
    for rec in records(dir, "exits.csv")? {
        let f = "exits.csv";
        let side = match field(&rec, 2, f)? {
            "upper" => ExitSide::Upper,
            "lower" => ExitSide::Lower,
            "censored" => ExitSide::Censored,
            other => return Err(parse_err(f, 0, format!("unknown exit side `{other}`"))),
        };
        let e = ExitRecord { spec_index: num(&rec, 1, f)?, side, time: num(&rec, 3, f)? };
        path_slot(&mut paths, &rec, f)?.exits.push(e);
    }
    if paths.iter().any(|p| p.checkpoints.is_empty()) {
        return Err(Error::Parse("a path has no checkpoints".into()));
    }
    Ok(Dataset::new(header.config, header.dim, header.tree, paths))
}

/// Recomputes the digest of the files in `dir`.
pub fn digest_dir(dir: &Path) -> Result<String> {
    let files: Vec<(&str, Vec<u8>)> = DATASET_FILES.iter().map(|n| Ok((*n, fs::read(dir.join(n))?))).collect::<Result<_>>()?;
    Ok(digest_files(&files).0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of the stage output.
    pub digest: String,
    /// Digests of the stage inputs by name.
    pub inputs: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    pub workers: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub config_digest: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(config_digest: String) -> RunManifest {
        RunManifest { artifact_version: ARTIFACT_VERSION.to_string(), config_digest, stages: BTreeMap::new() }
    }

    pub fn load(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::StageOrder(format!("no manifest in {}; run `simulate` first", dir.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), bytes)?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Result<&StageRecord> {
        self.stages.get(name).ok_or_else(|| Error::StageOrder(format!("stage `{name}` has not run")))
    }

    /// Fails unless `found` equals the digest recorded for `stage`.
    pub fn check(&self, stage: &str, found: &str) -> Result<()> {
        let expected = &self.stage(stage)?.digest;
        if expected != found {
            return Err(Error::DigestMismatch { expected: expected.clone(), found: found.to_string() });
        }
        Ok(())
    }

    /// Stage records without wall-clock fields, for reproducibility checks.
    pub fn digests(&self) -> BTreeMap<String, (String, BTreeMap<String, String>)> {
        self.stages.iter().map(|(k, v)| (k.clone(), (v.digest.clone(), v.inputs.clone()))).collect()
    }
}

/// Writes `value` as pretty JSON and returns its digest.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::Projection;
    use crate::measure::{Geometry, StepMeasure};
    use crate::walk::{ExitSpec, RaySpec, ReferencePoint, Simulator, StabilizationRule, StoppingSpec};

    fn dataset() -> Dataset {
        let mu = StepMeasure::simple_random_walk(Geometry::Tree { rank: 2 }).unwrap();
        let mut cfg = SimConfig::new(300, 20, 4);
        cfg.stopping = StoppingSpec::new(vec![10.0, 40.0, 1000.0], 0.5).unwrap();
        cfg.references = vec![ReferencePoint::periodic("u").unwrap(), ReferencePoint::periodic("uV").unwrap()];
        cfg.ray = Some(RaySpec { times: vec![10.0, 50.0], rule: StabilizationRule { rate: 0.5, spread: 0.866 }, search_depth: 8 });
        cfg.tracking = true;
        cfg.ray_exits = vec![ExitSpec { functional: vec![1.0, 0.0], drift: 0.0, k: 1.0, l: 1.0, s: 5.0, horizon: None }];
        Simulator::new(mu, Projection::canonical(2), cfg).unwrap().batch_run(1).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let ds = dataset();
        let dir = tempfile::tempdir().unwrap();
        let (digest, files) = write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(files.len(), DATASET_FILES.len());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.winding_moments, ds.winding_moments);
        assert_eq!(back.paths.len(), ds.paths.len());
        for (a, b) in back.paths.iter().zip(&ds.paths) {
            assert_eq!(a.checkpoints, b.checkpoints);
            assert_eq!(a.exits, b.exits);
            assert_eq!(a.ray, b.ray);
            assert_eq!(a.max_tracking, b.max_tracking);
            assert_eq!(a.stops, b.stops);
        }
        assert_eq!(digest_dir(dir.path()).unwrap(), digest);
        assert_eq!(dataset_digest(&back).unwrap(), digest);
    }

    #[test]
    fn tampering_changes_digest() {
        let ds = dataset();
        let dir = tempfile::tempdir().unwrap();
        let (digest, _) = write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("rays.csv");
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("0,99,1;1\n");
        fs::write(&p, text).unwrap();
        assert_ne!(digest_dir(dir.path()).unwrap(), digest);
    }

    #[test]
    fn manifest_stage_checks() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(RunManifest::load(dir.path()), Err(Error::StageOrder(_))));
        let mut m = RunManifest::new("cfg".into());
        m.stages.insert("simulate".into(), StageRecord { digest: "abc".into(), ..Default::default() });
        m.save(dir.path()).unwrap();
        let m = RunManifest::load(dir.path()).unwrap();
        assert!(m.check("simulate", "abc").is_ok());
        assert!(matches!(m.check("simulate", "abd"), Err(Error::DigestMismatch { .. })));
        assert!(matches!(m.check("estimate", "abc"), Err(Error::StageOrder(_))));
    }
}
