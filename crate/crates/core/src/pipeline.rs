//! Stage orchestration: `simulate → estimate → test`, plus `certify`.
//!
//! Every stage writes its artifacts into one output directory and records
//! their digests in `manifest.json`; later stages refuse to run on missing
//! or modified inputs.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{RunConfig, Tolerances, TEST_NAMES};
use crate::error::{Error, Result};
use crate::estimators::{
    compare_routes, estimate_anu_empirical, estimate_anu_formula, estimate_lambda, exact_abelian_moments, formula_stability,
    nondegeneracy_certificate, AbelianMoments, Certificate, CovarianceEstimate, DriftEstimate, FormulaEstimate, RouteComparison,
    StabilityDiagnostic,
};
use crate::group::Projection;
use crate::harness::{
    clt_stopped_test, clt_test, gr_test, lil_test, lln_test, pld_test, tracking_tail_test, GrConfig, KsConfig, LilConfig, TestReport,
};
use crate::martingale::{foster_check, overshoot_stats, time_control};
use crate::measure::StepMeasure;
use crate::persist::{digest_dir, file_digest, read_dataset, sha256_hex, write_dataset, write_json, RunManifest, StageRecord};
use crate::stats::rows_to_matrix;
use crate::walk::{calibrate, Calibration, Dataset, ExitSpec, RaySpec, SimConfig, Simulator, StoppingSpec};

pub const DATASET_DIR: &str = "dataset";
pub const CONFIG_FILE: &str = "config.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const ESTIMATES_FILE: &str = "estimates.json";
pub const REPORTS_FILE: &str = "reports.json";
pub const TABLE_FILE: &str = "table.txt";
pub const CERTIFICATE_FILE: &str = "certificate.json";

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "GEOWIND_WORKERS";

/// Worker count from `explicit`, else [`WORKERS_ENV`], else the number of
/// available cores.
pub fn resolve_workers(explicit: Option<usize>) -> usize {
    explicit
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

pub fn config_digest(cfg: &RunConfig) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(cfg)?))
}

/// Simulator for a validated config, calibrating the escape rate first.
pub fn build_simulator(cfg: &RunConfig, workers: usize) -> Result<(Simulator, Calibration)> {
    let mu = cfg.step_measure()?;
    let pi = cfg.projection()?;
    let cal = calibrate(&mu, cfg.calibration.horizon, cfg.calibration.paths, cfg.seed, workers)?;
    let mut sc = SimConfig::new(cfg.horizon, cfg.paths, cfg.seed);
    sc.checkpoint_stride = cfg.checkpoint_stride;
    if let Some(s) = &cfg.stopping {
        sc.stopping = StoppingSpec::new(s.thresholds.clone(), s.lambda_ref.unwrap_or(cal.lambda))?;
    }
    sc.references = cfg.reference_points()?;
    if let Some(r) = &cfg.ray {
        sc.ray = Some(RaySpec { times: r.times.clone(), rule: cal.rule(), search_depth: r.search_depth });
    }
    sc.tracking = cfg.tracking;
    let mean = exact_abelian_moments(&mu, &pi).mean;
    sc.ray_exits = cfg
        .exits
        .iter()
        .map(|e| {
            let drift = e.functional.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>() / cal.lambda;
            ExitSpec { functional: e.functional.clone(), drift, k: e.k, l: e.l, s: e.s, horizon: None }
        })
        .collect();
    Ok((Simulator::new(mu, pi, sc)?, cal))
}

/// Estimates consumed by the test stage; the full estimator outputs are
/// kept in `details`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub dataset_digest: String,
    pub lambda: f64,
    pub lambda_se: f64,
    pub e_nu: Vec<f64>,
    pub e_nu_se: Vec<f64>,
    pub a_nu: Vec<Vec<f64>>,
    /// `formula` or `empirical`.
    pub a_nu_source: String,
    pub min_eigenvalue_ci: Option<(f64, f64)>,
    pub details: Value,
}

#[derive(Clone, Debug)]
pub struct EstimateParts {
    pub moments: AbelianMoments,
    pub drift: DriftEstimate,
    pub formula: Option<FormulaEstimate>,
    pub stability: Option<StabilityDiagnostic>,
    pub empirical: Option<(f64, CovarianceEstimate)>,
    pub routes: Option<RouteComparison>,
}

impl EstimateParts {
    /// The formula route when available, else the ray route.
    pub fn a_nu(&self) -> Option<&CovarianceEstimate> {
        self.formula.as_ref().map(|f| &f.estimate).or(self.empirical.as_ref().map(|e| &e.1))
    }
}

pub fn estimate_parts(ds: &Dataset, mu: &StepMeasure, pi: &Projection) -> Result<EstimateParts> {
    let moments = exact_abelian_moments(mu, pi);
    let drift = estimate_lambda(ds, &moments.mean)?;
    let n = ds.horizon();
    let formula =
        if ds.tree && !ds.config.references.is_empty() { Some(estimate_anu_formula(ds, n, &drift.e_nu, drift.lambda)?) } else { None };
    let steps: Vec<u64> = [n / 4, n / 2, n].into_iter().filter(|&s| s > 0).collect();
    let stability = match &formula {
        Some(_) if steps.len() == 3 && steps.iter().all(|&s| ds.paths[0].checkpoint_at(s).is_some()) => {
            Some(formula_stability(ds, &steps, &drift.e_nu, drift.lambda)?)
        }
        _ => None,
    };
    let empirical = match &ds.config.ray {
        Some(r) if !r.times.is_empty() => {
            let t = r.times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Some((t, estimate_anu_empirical(ds, t, &drift.e_nu)?))
        }
        _ => None,
    };
    let routes = match (&formula, &empirical) {
        (Some(f), Some((_, e))) => Some(compare_routes(&f.estimate, e)),
        _ => None,
    };
    Ok(EstimateParts { moments, drift, formula, stability, empirical, routes })
}

pub fn estimate_dataset(ds: &Dataset, mu: &StepMeasure, pi: &Projection, digest: String) -> Result<(Estimates, EstimateParts)> {
    let parts = estimate_parts(ds, mu, pi)?;
    let (a_nu, source, ci) = match (&parts.formula, &parts.empirical) {
        (Some(f), _) => (f.estimate.matrix.clone(), "formula", Some(f.estimate.min_eigenvalue_ci)),
        (None, Some((_, e))) => (e.matrix.clone(), "empirical", Some(e.min_eigenvalue_ci)),
        (None, None) => (Vec::new(), "none", None),
    };
    let details = json!({
        "moments": parts.moments,
        "drift": parts.drift,
        "formula": parts.formula,
        "stability": parts.stability,
        "empirical": parts.empirical.as_ref().map(|(t, e)| json!({"t": t, "estimate": e})),
        "routes": parts.routes,
    });
    let est = Estimates {
        dataset_digest: digest,
        lambda: parts.drift.lambda,
        lambda_se: parts.drift.se,
        e_nu: parts.drift.e_nu.clone(),
        e_nu_se: parts.drift.e_nu_se.clone(),
        a_nu,
        a_nu_source: source.to_string(),
        min_eigenvalue_ci: ci,
        details,
    };
    Ok((est, parts))
}

/// Escape rate of the simple random walk on the free group of rank `k`:
/// the drift `(2k-2)/(2k)` of the word-length birth-death chain.
pub fn srw_escape_rate(rank: usize) -> f64 {
    let k = rank as f64;
    (2.0 * k - 2.0) / (2.0 * k)
}

fn is_tree_srw(mu: &StepMeasure) -> bool {
    let k = mu.rank();
    mu.geometry().is_tree()
        && mu.atoms().len() == 2 * k
        && mu.atoms().iter().all(|a| a.word.len() == 1 && (a.prob - 1.0 / (2 * k) as f64).abs() < 1e-12)
}

fn selected(selection: &[String], name: &str) -> bool {
    selection.is_empty() || selection.iter().any(|s| s == name)
}

fn ensure(explicit: bool, applicable: bool, name: &str, why: &str) -> Result<bool> {
    if !applicable && explicit {
        return Err(Error::InvalidInput(format!("test `{name}` is not applicable: {why}")));
    }
    Ok(applicable)
}

/// Runs the selected tests (all applicable ones when `selection` is
/// empty) on a dataset with its estimates.
pub fn evaluate(ds: &Dataset, est: &Estimates, mu: &StepMeasure, selection: &[String], tol: &Tolerances) -> Result<Vec<TestReport>> {
    for s in selection {
        if !TEST_NAMES.contains(&s.as_str()) {
            return Err(Error::InvalidInput(format!("unknown test `{s}`")));
        }
    }
    let explicit = !selection.is_empty();
    let ks = KsConfig { alpha: tol.ks_alpha, frobenius_tol: tol.frobenius_tol };
    let a = rows_to_matrix(&est.a_nu);
    let has_a = !est.a_nu.is_empty();
    let ray_times: Vec<f64> = ds.config.ray.as_ref().map(|r| r.times.clone()).unwrap_or_default();
    let has_rays = !ray_times.is_empty();
    let has_stops = !ds.config.stopping.thresholds.is_empty();
    let t_max = ray_times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();

    if selected(selection, "lambda") {
        let mut r = TestReport::new("lambda", ds);
        if is_tree_srw(mu) {
            let oracle = srw_escape_rate(mu.rank());
            r.statistic = (est.lambda - oracle).abs();
            r.threshold = tol.lambda_abs;
            r.details = json!({"lambda": est.lambda, "se": est.lambda_se, "oracle": oracle});
        } else {
            let d = &est.details["drift"];
            let slope = d["slope_lambda"].as_f64().unwrap_or(f64::NAN);
            let slope_se = d["slope_se"].as_f64().unwrap_or(f64::INFINITY);
            r.statistic = (est.lambda - slope).abs();
            r.threshold = tol.joint_se_factor * est.lambda_se.hypot(slope_se);
            r.flags.push("slope-cross-check".into());
            r.details = json!({"lambda": est.lambda, "se": est.lambda_se, "slope_lambda": slope});
        }
        r.pass = r.statistic <= r.threshold;
        out.push(r);
    }
    if selected(selection, "lln") && ensure(explicit, has_rays, "lln", "no ray windings")? {
        let mut r = lln_test(ds, &est.e_nu, &est.e_nu_se)?;
        r.pass &= r.statistic < tol.lln_abs;
        out.push(r);
    }
    if selected(selection, "clt") && ensure(explicit, has_rays && has_a, "clt", "needs ray windings and an A_ν estimate")? {
        out.push(clt_test(ds, t_max, &est.e_nu, &a, ks)?);
    }
    if selected(selection, "clt_stopped") && ensure(explicit, has_stops && has_a, "clt_stopped", "needs stopping thresholds")? {
        let last = ds.config.stopping.thresholds.len() - 1;
        out.push(clt_stopped_test(ds, last, &est.e_nu, &a, ks, tol.max_censored)?);
    }
    if selected(selection, "anu_routes") {
        let routes = &est.details["routes"];
        let formula = &est.details["formula"];
        if ensure(explicit, !routes.is_null() && !formula.is_null(), "anu_routes", "needs reference points and ray windings")? {
            let mut r = TestReport::new("anu_routes", ds);
            r.statistic = routes["max_z"].as_f64().unwrap_or(f64::INFINITY);
            r.threshold = tol.joint_se_factor;
            let uniform = !formula["uniformity_violation"].as_bool().unwrap_or(true);
            r.pass = r.statistic <= r.threshold && uniform;
            if !uniform {
                r.flags.push("cross-x-spread".into());
            }
            r.details =
                json!({"routes": routes, "cross_x_spread": formula["cross_x_spread"], "spread_threshold": formula["spread_threshold"]});
            out.push(r);
        }
    }
    if selected(selection, "rank") && ensure(explicit, est.min_eigenvalue_ci.is_some(), "rank", "no A_ν estimate")? {
        let (lo, hi) = est.min_eigenvalue_ci.expect("checked");
        let mut r = TestReport::new("rank", ds);
        r.statistic = lo;
        r.threshold = 0.0;
        r.pass = lo > 0.0;
        r.details = json!({"min_eigenvalue_ci": [lo, hi], "source": est.a_nu_source});
        out.push(r);
    }
    if selected(selection, "gambler_ruin") && ensure(explicit, !ds.config.ray_exits.is_empty(), "gambler_ruin", "no exit specs")? {
        let mut seen: Vec<(f64, f64)> = Vec::new();
        for e in &ds.config.ray_exits {
            if !seen.contains(&(e.k, e.l)) {
                seen.push((e.k, e.l));
                out.push(gr_test(ds, e.k, e.l, GrConfig { tolerance: tol.exit_abs, max_censored: tol.max_censored })?);
            }
        }
    }
    if selected(selection, "pld") && ensure(explicit, ray_times.len() >= 2, "pld", "needs at least two ray times")? {
        out.push(pld_test(ds, &est.e_nu, tol.pld_alpha, &ray_times, tol.pld_min_r2)?);
    }
    if selected(selection, "foster") && ensure(explicit, has_stops && ds.tree, "foster", "needs stopping thresholds on the tree")? {
        let f = foster_check(ds, mu.max_step_length());
        let mut r = TestReport::new("foster", ds);
        r.statistic =
            f.rows.iter().map(|row| (row.mean_tau - row.threshold) / row.se.max(f64::MIN_POSITIVE)).fold(f64::NEG_INFINITY, f64::max);
        r.threshold = tol.joint_se_factor;
        r.pass = f.pass;
        r.details = serde_json::to_value(&f)?;
        out.push(r);
    }
    if selected(selection, "overshoot") && ensure(explicit, has_stops && ds.tree, "overshoot", "needs stopping thresholds on the tree")? {
        let o = overshoot_stats(ds, mu.max_step_length(), tol.overshoot_band);
        let mut r = TestReport::new("overshoot", ds);
        r.statistic = o.rows.iter().map(|row| row.p99).fold(f64::NEG_INFINITY, f64::max);
        r.threshold = o.support_bound;
        r.pass = o.tight && o.rows.iter().all(|row| row.within_support_bound);
        r.details = serde_json::to_value(&o)?;
        out.push(r);
    }
    if selected(selection, "time_control")
        && ensure(explicit, ds.config.stopping.thresholds.len() >= 2, "time_control", "needs two thresholds")?
    {
        let t = time_control(ds, tol.time_control_quantile, tol.time_control_band)?;
        let mut r = TestReport::new("time_control", ds);
        r.statistic = t.spread;
        r.threshold = t.band;
        r.pass = t.stable;
        r.details = serde_json::to_value(&t)?;
        out.push(r);
    }
    if selected(selection, "tracking") && ensure(explicit, ds.config.tracking && has_stops, "tracking", "needs tracking and thresholds")? {
        out.push(tracking_tail_test(ds)?);
    }
    if selected(selection, "lil") && ensure(explicit, has_rays && has_a, "lil", "needs ray windings")? {
        out.push(lil_test(ds, &est.e_nu, &a, LilConfig { band: tol.lil_band, max_single: tol.lil_max_single })?);
    }
    Ok(out)
}

fn stage_record(digest: String, inputs: &[(&str, &str)], started: Instant, workers: usize) -> StageRecord {
    StageRecord {
        digest,
        inputs: inputs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        files: Default::default(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        workers,
    }
}

/// Simulates the configured dataset into `out/dataset` and starts a fresh
/// manifest.
pub fn run_simulate(cfg: &RunConfig, out: &Path, workers: usize) -> Result<Dataset> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    let cfg_digest = config_digest(cfg)?;
    let mut manifest = RunManifest::new(cfg_digest.clone());
    let config_file_digest = write_json(&out.join(CONFIG_FILE), cfg)?;
    let (sim, cal) = build_simulator(cfg, workers)?;
    let cal_digest = write_json(&out.join(CALIBRATION_FILE), &cal)?;
    let ds = sim.batch_run(workers)?;
    let (digest, files) = write_dataset(&ds, &out.join(DATASET_DIR))?;
    let mut rec = stage_record(digest, &[("config", &cfg_digest)], started, workers);
    rec.files = files;
    rec.files.insert(CONFIG_FILE.into(), config_file_digest);
    rec.files.insert(CALIBRATION_FILE.into(), cal_digest);
    manifest.stages.insert("simulate".into(), rec);
    manifest.save(out)?;
    Ok(ds)
}

/// Loads the config recorded by `simulate` and checks it against the
/// manifest.
pub fn load_run_config(out: &Path, manifest: &RunManifest) -> Result<RunConfig> {
    let path = out.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::StageOrder(format!("{} missing; run `simulate` first", path.display())));
    }
    let cfg = RunConfig::parse(&std::fs::read_to_string(path)?)?;
    let found = config_digest(&cfg)?;
    if found != manifest.config_digest {
        return Err(Error::DigestMismatch { expected: manifest.config_digest.clone(), found });
    }
    Ok(cfg)
}

fn load_checked_dataset(out: &Path, manifest: &RunManifest) -> Result<(Dataset, String)> {
    manifest.stage("simulate")?;
    let dir = out.join(DATASET_DIR);
    let digest = digest_dir(&dir)?;
    manifest.check("simulate", &digest)?;
    Ok((read_dataset(&dir)?, digest))
}

pub fn run_estimate(out: &Path) -> Result<Estimates> {
    let started = Instant::now();
    let mut manifest = RunManifest::load(out)?;
    let cfg = load_run_config(out, &manifest)?;
    let (ds, digest) = load_checked_dataset(out, &manifest)?;
    let (est, _) = estimate_dataset(&ds, &cfg.step_measure()?, &cfg.projection()?, digest.clone())?;
    let d = write_json(&out.join(ESTIMATES_FILE), &est)?;
    manifest.stages.insert("estimate".into(), stage_record(d, &[("dataset", &digest)], started, 1));
    manifest.stages.remove("test");
    manifest.save(out)?;
    Ok(est)
}

/// Runs the tests selected in the config; `tolerances` overrides the
/// config's own.
pub fn run_tests(out: &Path, tolerances: Option<Tolerances>) -> Result<Vec<TestReport>> {
    let started = Instant::now();
    let mut manifest = RunManifest::load(out)?;
    let cfg = load_run_config(out, &manifest)?;
    manifest.stage("estimate").map_err(|_| Error::StageOrder("no estimates; run `estimate` first".into()))?;
    let est_path = out.join(ESTIMATES_FILE);
    let est_digest = file_digest(&est_path)?;
    manifest.check("estimate", &est_digest)?;
    let (ds, digest) = load_checked_dataset(out, &manifest)?;
    let est: Estimates = serde_json::from_str(&std::fs::read_to_string(&est_path)?)?;
    if est.dataset_digest != digest {
        return Err(Error::DigestMismatch { expected: est.dataset_digest, found: digest });
    }
    let tol = match tolerances {
        Some(t) => t,
        None => cfg.tolerances()?,
    };
    let reports: Vec<TestReport> =
        evaluate(&ds, &est, &cfg.step_measure()?, &cfg.tests, &tol)?.into_iter().map(|r| r.with_digest(digest.clone())).collect();
    let d = write_json(&out.join(REPORTS_FILE), &reports)?;
    std::fs::write(out.join(TABLE_FILE), crate::harness::text_table(&reports))?;
    manifest.stages.insert(
        "test".into(),
        stage_record(
            d,
            &[("dataset", &digest), ("estimates", &est_digest), ("tolerances", &sha256_hex(&serde_json::to_vec(&tol)?))],
            started,
            1,
        ),
    );
    manifest.save(out)?;
    Ok(reports)
}

/// Default search depth for the non-degeneracy certificate.
pub const CERTIFICATE_DEPTH: usize = 4;

pub fn run_certify(cfg: &RunConfig, out: Option<&Path>) -> Result<Certificate> {
    let cert = nondegeneracy_certificate(&cfg.step_measure()?, &cfg.projection()?, CERTIFICATE_DEPTH)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join(CERTIFICATE_FILE), &cert)?;
    }
    Ok(cert)
}

/// Reports written by the test stage, after checking the manifest.
pub fn load_reports(out: &Path) -> Result<(Vec<TestReport>, Estimates)> {
    let manifest = RunManifest::load(out)?;
    manifest.stage("estimate").map_err(|_| Error::StageOrder("no estimates; run `estimate` first".into()))?;
    manifest.stage("test").map_err(|_| Error::StageOrder("no test reports; run `test` first".into()))?;
    let rp = out.join(REPORTS_FILE);
    manifest.check("test", &file_digest(&rp)?)?;
    let ep = out.join(ESTIMATES_FILE);
    manifest.check("estimate", &file_digest(&ep)?)?;
    Ok((serde_json::from_str(&std::fs::read_to_string(rp)?)?, serde_json::from_str(&std::fs::read_to_string(ep)?)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    fn small(name: &str) -> RunConfig {
        let mut c = preset(name).unwrap();
        c.paths = 200;
        c.horizon = c.horizon.min(2000);
        c.calibration.paths = 200;
        c.calibration.horizon = c.calibration.horizon.min(2000);
        if let Some(r) = &mut c.ray {
            r.times.retain(|&t| t <= 600.0);
        }
        for e in &mut c.exits {
            e.s = 10.0;
        }
        c
    }

    #[test]
    fn pipeline_end_to_end_is_deterministic() {
        let cfg = small("srw-f2");
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [a.path(), b.path()] {
            run_simulate(&cfg, dir, 1).unwrap();
            run_estimate(dir).unwrap();
            let reports = run_tests(dir, None).unwrap();
            assert!(reports.iter().any(|r| r.name == "lambda"));
        }
        let ma = RunManifest::load(a.path()).unwrap();
        let mb = RunManifest::load(b.path()).unwrap();
        assert_eq!(ma.digests(), mb.digests());
        assert_eq!(std::fs::read(a.path().join(REPORTS_FILE)).unwrap(), std::fs::read(b.path().join(REPORTS_FILE)).unwrap());
    }

    #[test]
    fn stage_order_and_digest_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_estimate(dir.path()), Err(Error::StageOrder(_))));
        let cfg = small("example-anu");
        run_simulate(&cfg, dir.path(), 1).unwrap();
        assert!(matches!(run_tests(dir.path(), None), Err(Error::StageOrder(_))));
        assert!(matches!(load_reports(dir.path()), Err(Error::StageOrder(_))));
        run_estimate(dir.path()).unwrap();
        let p = dir.path().join(DATASET_DIR).join("paths.csv");
        let mut text = std::fs::read_to_string(&p).unwrap();
        text = text.replacen("false", "true", 1);
        std::fs::write(&p, text).unwrap();
        assert!(matches!(run_tests(dir.path(), None), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn certify_example() {
        let cert = run_certify(&preset("example-anu").unwrap(), None).unwrap();
        assert_eq!(cert.verdict, crate::estimators::Verdict::Nondegenerate);
    }

    #[test]
    fn workers_resolution() {
        assert_eq!(resolve_workers(Some(3)), 3);
        assert!(resolve_workers(None) >= 1);
    }

    #[test]
    fn srw_rate_oracle() {
        assert_eq!(srw_escape_rate(2), 0.5);
        assert_eq!(srw_escape_rate(3), 2.0 / 3.0);
    }
}
