//! Run configuration, bundled presets and the versioned tolerance file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::group::{AbelianVector, Projection, Word};
use crate::measure::{Geometry, StepMeasure};
use crate::plane::SchottkyModel;
use crate::walk::ReferencePoint;

pub const DEFAULT_TOLERANCES: &str = include_str!("../data/tolerances.json");

/// Names accepted by `--preset`; `all` runs the acceptance suite.
pub const PRESETS: &[&str] = &["srw-f2", "example-anu", "schottky-srw", "all"];

const PRESET_SRW: &str = include_str!("../data/presets/srw-f2.json");
const PRESET_ANU: &str = include_str!("../data/presets/example-anu.json");
const PRESET_SCHOTTKY: &str = include_str!("../data/presets/schottky-srw.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub version: u32,
    pub ks_alpha: f64,
    pub frobenius_tol: f64,
    pub lambda_abs: f64,
    pub lln_abs: f64,
    pub exit_abs: f64,
    pub max_censored: f64,
    pub lil_band: (f64, f64),
    pub lil_max_single: f64,
    pub pld_alpha: f64,
    pub pld_min_r2: f64,
    pub joint_se_factor: f64,
    pub time_control_band: f64,
    pub time_control_quantile: f64,
    pub overshoot_band: f64,
    pub tracking_quantile: f64,
    pub exact_core_seconds: f64,
    pub plane_busemann: f64,
    pub plane_isometry: f64,
    pub plane_cocycle: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_TOLERANCES).expect("bundled tolerances parse")
    }
}

impl Tolerances {
    /// Defaults with the keys of `overrides` replaced; unknown keys are
    /// rejected.
    pub fn with_overrides(overrides: &Value) -> Result<Tolerances> {
        let mut base: Value = serde_json::from_str(DEFAULT_TOLERANCES)?;
        let (Value::Object(b), Value::Object(o)) = (&mut base, overrides) else {
            return Err(Error::Config { key: "tolerances".into(), message: "expected an object".into() });
        };
        for (k, v) in o {
            if !b.contains_key(k) {
                return Err(Error::Config { key: format!("tolerances.{k}"), message: "unknown tolerance".into() });
            }
            b.insert(k.clone(), v.clone());
        }
        serde_json::from_value(base).map_err(|e| Error::Config { key: "tolerances".into(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Tolerances> {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config { key: path.display().to_string(), message: e.to_string() })?;
        Tolerances::with_overrides(&v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Tree {
        rank: usize,
    },
    /// Symmetric Schottky group with axes through the origin.
    Plane {
        rank: usize,
        trace: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub word: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureConfig {
    SimpleRandomWalk,
    Atoms(Vec<AtomConfig>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingConfig {
    pub thresholds: Vec<f64>,
    /// Escape rate defining the radii; calibrated when absent.
    #[serde(default)]
    pub lambda_ref: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RayConfig {
    pub times: Vec<f64>,
    #[serde(default = "default_search_depth")]
    pub search_depth: usize,
}

fn default_search_depth() -> usize {
    24
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitConfig {
    pub functional: Vec<f64>,
    pub k: f64,
    pub l: f64,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub horizon: u64,
    pub paths: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { horizon: 10_000, paths: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub model: ModelConfig,
    pub measure: MeasureConfig,
    /// Images of the generators; canonical when absent.
    #[serde(default)]
    pub projection: Option<Vec<Vec<i64>>>,
    pub horizon: u64,
    pub paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_stride: Option<u64>,
    #[serde(default)]
    pub stopping: Option<StoppingConfig>,
    /// Periodic boundary points `p p p …` given by `p`.
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default)]
    pub ray: Option<RayConfig>,
    #[serde(default)]
    pub tracking: bool,
    #[serde(default)]
    pub exits: Vec<ExitConfig>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    /// Tests run by the `test` stage; all applicable tests when empty.
    #[serde(default)]
    pub tests: Vec<String>,
    #[serde(default)]
    pub tolerances: Option<Value>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Test names understood by the `test` stage.
pub const TEST_NAMES: &[&str] = &[
    "lambda",
    "lln",
    "clt",
    "clt_stopped",
    "anu_routes",
    "rank",
    "gambler_ruin",
    "pld",
    "foster",
    "overshoot",
    "time_control",
    "tracking",
    "lil",
];

fn cfg_err(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config { key: key.into(), message: message.into() }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| cfg_err(serde_key(&e.to_string()), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn geometry(&self) -> Result<Geometry> {
        match self.model {
            ModelConfig::Tree { rank } => {
                if rank < 2 {
                    return Err(cfg_err("model.tree.rank", "rank must be at least 2"));
                }
                Ok(Geometry::Tree { rank })
            }
            ModelConfig::Plane { rank, trace } => SchottkyModel::symmetric(rank, trace)
                .map(|m| Geometry::Plane(Arc::new(m)))
                .map_err(|e| cfg_err("model.plane", e.to_string())),
        }
    }

    pub fn step_measure(&self) -> Result<StepMeasure> {
        let g = self.geometry()?;
        match &self.measure {
            MeasureConfig::SimpleRandomWalk => StepMeasure::simple_random_walk(g),
            MeasureConfig::Atoms(atoms) => {
                let mut parsed = Vec::with_capacity(atoms.len());
                for (i, a) in atoms.iter().enumerate() {
                    let w: Word = a.word.parse().map_err(|e: Error| cfg_err(format!("measure.atoms[{i}].word"), e.to_string()))?;
                    if !(a.prob > 0.0 && a.prob <= 1.0) {
                        return Err(cfg_err(format!("measure.atoms[{i}].prob"), format!("probability {} outside (0, 1]", a.prob)));
                    }
                    parsed.push((w, a.prob));
                }
                StepMeasure::new(parsed, g).map_err(|e| cfg_err("measure.atoms", e.to_string()))
            }
        }
    }

    pub fn projection(&self) -> Result<Projection> {
        let rank = match self.model {
            ModelConfig::Tree { rank } | ModelConfig::Plane { rank, .. } => rank,
        };
        match &self.projection {
            None => Ok(Projection::canonical(rank)),
            Some(rows) => {
                if rows.len() != rank {
                    return Err(cfg_err("projection", format!("expected {rank} generator images, got {}", rows.len())));
                }
                Projection::new(rows.iter().map(|r| AbelianVector(r.clone())).collect()).map_err(|e| cfg_err("projection", e.to_string()))
            }
        }
    }

    pub fn reference_points(&self) -> Result<Vec<ReferencePoint>> {
        self.references
            .iter()
            .enumerate()
            .map(|(i, r)| ReferencePoint::periodic(r).map_err(|e| cfg_err(format!("references[{i}]"), e.to_string())))
            .collect()
    }

    pub fn tolerances(&self) -> Result<Tolerances> {
        match &self.tolerances {
            None => Ok(Tolerances::default()),
            Some(v) => Tolerances::with_overrides(v),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mu = self.step_measure()?;
        let pi = self.projection()?;
        if self.horizon == 0 {
            return Err(cfg_err("horizon", "must be positive"));
        }
        if self.paths == 0 {
            return Err(cfg_err("paths", "must be positive"));
        }
        if self.checkpoint_stride == Some(0) {
            return Err(cfg_err("checkpoint_stride", "must be positive"));
        }
        if let Some(s) = &self.stopping {
            if s.thresholds.iter().any(|t| !(*t > 0.0)) || s.thresholds.windows(2).any(|w| w[0] >= w[1]) {
                return Err(cfg_err("stopping.thresholds", "must be positive and increasing"));
            }
            if s.lambda_ref.is_some_and(|l| !(l > 0.0)) {
                return Err(cfg_err("stopping.lambda_ref", "must be positive"));
            }
        }
        self.reference_points()?;
        if !self.references.is_empty() && !mu.geometry().is_tree() {
            return Err(cfg_err("references", "reference points need the tree model"));
        }
        if let Some(r) = &self.ray {
            if r.times.iter().any(|t| !(*t > 0.0)) {
                return Err(cfg_err("ray.times", "must be positive"));
            }
        }
        for (i, e) in self.exits.iter().enumerate() {
            if e.functional.len() != pi.dim() {
                return Err(cfg_err(format!("exits[{i}].functional"), format!("expected length {}", pi.dim())));
            }
            if !(e.k > 0.0 && e.l > 0.0 && e.s > 0.0) {
                return Err(cfg_err(format!("exits[{i}]"), "k, l and s must be positive"));
            }
        }
        if (self.tracking || !self.exits.is_empty()) && self.ray.is_none() {
            return Err(cfg_err("ray", "tracking and exits need ray windings"));
        }
        for (i, t) in self.tests.iter().enumerate() {
            if !TEST_NAMES.contains(&t.as_str()) {
                return Err(cfg_err(format!("tests[{i}]"), format!("unknown test `{t}`")));
            }
        }
        self.tolerances()?;
        Ok(())
    }
}

/// Picks the offending key out of a serde message when it names one.
fn serde_key(msg: &str) -> String {
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(i) = msg.find(marker) {
            let rest = &msg[i + marker.len()..];
            if let Some(j) = rest.find('`') {
                return rest[..j].to_string();
            }
        }
    }
    "<root>".into()
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::parse(&text)
}

/// A bundled preset by name.
pub fn preset(name: &str) -> Result<RunConfig> {
    let text = match name {
        "srw-f2" => PRESET_SRW,
        "example-anu" => PRESET_ANU,
        "schottky-srw" => PRESET_SCHOTTKY,
        "all" => return Err(cfg_err("preset", "`all` names the acceptance suite, not a single run")),
        _ => return Err(cfg_err("preset", format!("unknown preset `{name}`; expected one of {PRESETS:?}"))),
    };
    RunConfig::parse(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load() {
        let srw = preset("srw-f2").unwrap();
        let mu = srw.step_measure().unwrap();
        assert_eq!(mu.atoms().len(), 4);
        assert_eq!(srw.projection().unwrap(), Projection::canonical(2));
        let anu = preset("example-anu").unwrap();
        let words: Vec<String> = anu.step_measure().unwrap().atoms().iter().map(|a| a.word.to_string()).collect();
        assert_eq!(words, vec!["u", "uv", "uV"]);
        assert!(!preset("schottky-srw").unwrap().step_measure().unwrap().geometry().is_tree());
        assert!(preset("nope").is_err());
    }

    #[test]
    fn schema_errors_name_the_key() {
        let base: Value = serde_json::from_str(PRESET_ANU).unwrap();
        let mut neg = base.clone();
        neg["measure"]["atoms"][1]["prob"] = Value::from(-0.5);
        match RunConfig::parse(&neg.to_string()) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "measure.atoms[1].prob"),
            other => panic!("{other:?}"),
        }
        let mut extra = base.clone();
        extra["colour"] = Value::from("red");
        match RunConfig::parse(&extra.to_string()) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "colour"),
            other => panic!("{other:?}"),
        }
        let mut missing = base.clone();
        missing.as_object_mut().unwrap().remove("paths");
        match RunConfig::parse(&missing.to_string()) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "paths"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("{not json").is_err());
    }

    #[test]
    fn tolerance_overrides() {
        let t = Tolerances::with_overrides(&serde_json::json!({"exit_abs": 0.05})).unwrap();
        assert_eq!(t.exit_abs, 0.05);
        assert_eq!(t.ks_alpha, Tolerances::default().ks_alpha);
        assert!(Tolerances::with_overrides(&serde_json::json!({"bogus": 1})).is_err());
        assert_eq!(Tolerances::default().version, 1);
    }
}
