//! The recentered winding cocycle and its martingale: replayed series,
//! the ψ correction, stopping-time and exit diagnostics.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{AbelianVector, Projection, Word};
use crate::measure::{Geometry, StepMeasure};
use crate::plane::{busemann_cocycle_disk, mobius_apply_boundary, CircleBoundaryPoint, OrbitTracker};
use crate::rng::{path_seed, StepStream};
use crate::stats::{quantile_sorted, RealMoments};
use crate::tree::{busemann_cocycle, gromov_product_capped, BoundaryWord};
use crate::walk::{
    limit_boundary_point, Dataset, ExitSide, ExitTracker, PrefixAgreement, Simulator, StabilizationRule, StoppingSpec, TreeWalker,
};

/// A boundary point of either model.
#[derive(Clone, Debug)]
pub enum BoundaryRef {
    Tree(BoundaryWord),
    Plane(CircleBoundaryPoint),
}

impl BoundaryRef {
    pub fn translate(&self, geometry: &Geometry, gamma: &Word) -> Result<BoundaryRef> {
        match (self, geometry) {
            (BoundaryRef::Tree(x), Geometry::Tree { .. }) => Ok(BoundaryRef::Tree(x.translate(gamma)?)),
            (BoundaryRef::Plane(x), Geometry::Plane(m)) => Ok(BoundaryRef::Plane(mobius_apply_boundary(&m.isometry_of(gamma), *x))),
            _ => Err(Error::InvalidInput("boundary point does not belong to the model".into())),
        }
    }
}

/// `σ̃(g, x) = π(g) + σ(g, x)·e`, the vector cocycle whose inverse-path
/// values give the martingale.
#[derive(Clone, Debug)]
pub struct CocycleHandle {
    geometry: Geometry,
    pi: Projection,
    e_nu: Vec<f64>,
}

const SELF_TEST_WORDS: usize = 64;
const PLANE_COCYCLE_TOL: f64 = 1e-8;

impl CocycleHandle {
    /// Checks the cocycle relation on a deterministic sample of words at `x`.
    pub fn new(geometry: Geometry, pi: Projection, e_nu: Vec<f64>, x: &BoundaryRef) -> Result<CocycleHandle> {
        if e_nu.len() != pi.dim() || pi.rank() != geometry.rank() {
            return Err(Error::InvalidInput("drift, projection and model dimensions disagree".into()));
        }
        let h = CocycleHandle { geometry, pi, e_nu };
        h.self_test(x)?;
        Ok(h)
    }

    pub fn dim(&self) -> usize {
        self.pi.dim()
    }

    pub fn e_nu(&self) -> &[f64] {
        &self.e_nu
    }

    /// The scalar Busemann cocycle `σ(g, x)`.
    pub fn busemann(&self, gamma: &Word, x: &BoundaryRef) -> Result<f64> {
        match (x, &self.geometry) {
            (BoundaryRef::Tree(xi), Geometry::Tree { .. }) => Ok(busemann_cocycle(gamma, xi)? as f64),
            (BoundaryRef::Plane(xi), Geometry::Plane(m)) => Ok(busemann_cocycle_disk(&m.isometry_of(gamma), *xi)),
            _ => Err(Error::InvalidInput("boundary point does not belong to the model".into())),
        }
    }

    pub fn evaluate(&self, gamma: &Word, x: &BoundaryRef) -> Result<Vec<f64>> {
        let s = self.busemann(gamma, x)?;
        let p = self.pi.abelianize(gamma);
        Ok(p.0.iter().zip(&self.e_nu).map(|(&a, e)| a as f64 + s * e).collect())
    }

    fn self_test(&self, x: &BoundaryRef) -> Result<()> {
        let k = self.geometry.rank();
        let mut rng = StepStream::new(0x5E1F_7E57);
        let mut word = |len: usize| {
            Word::reduce((0..len).map(|_| {
                let c = (rng.next_u64() % (2 * k as u64)) as u8;
                crate::group::Letter::from_code(c)
            }))
        };
        let tol = if self.geometry.is_tree() { 1e-12 } else { PLANE_COCYCLE_TOL };
        for i in 0..SELF_TEST_WORDS {
            let g1 = word(1 + i % 7);
            let g2 = word(1 + i % 5);
            let lhs = self.evaluate(&g2.multiply(&g1), x)?;
            let a = self.evaluate(&g2, &x.translate(&self.geometry, &g1)?)?;
            let b = self.evaluate(&g1, x)?;
            for j in 0..lhs.len() {
                if (lhs[j] - a[j] - b[j]).abs() > tol * (1.0 + lhs[j].abs()) {
                    return Err(Error::Numerical(format!("cocycle relation fails for ({g2}, {g1}): {lhs:?} vs {a:?} + {b:?}")));
                }
            }
        }
        Ok(())
    }
}

/// `M_k = π(w_k) - σ(w_k⁻¹, x)·e` at the recorded steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSeries {
    pub steps: Vec<u64>,
    pub values: Vec<Vec<f64>>,
    pub e_nu: Vec<f64>,
    pub reference: String,
}

/// Re-runs a path step by step, exposing `π(w_k)` and `σ(w_k⁻¹, x)`.
pub struct Replay<'a> {
    kind: ReplayKind<'a>,
    step: u64,
}

enum ReplayKind<'a> {
    Tree {
        walker: TreeWalker,
        agree: PrefixAgreement,
    },
    Plane {
        measure: &'a StepMeasure,
        atoms: Vec<crate::plane::Isometry>,
        atom_pi: Vec<AbelianVector>,
        stream: StepStream,
        tracker: OrbitTracker,
        winding: AbelianVector,
        xi: CircleBoundaryPoint,
    },
}

impl<'a> Replay<'a> {
    pub fn new(sim: &'a Simulator, seed: u64, x: &BoundaryRef) -> Result<Replay<'a>> {
        let kind = match (sim.measure().geometry(), x) {
            (Geometry::Tree { .. }, BoundaryRef::Tree(xi)) => {
                ReplayKind::Tree { walker: sim.tree_walker(seed), agree: PrefixAgreement::new(xi.clone()) }
            }
            (Geometry::Plane(m), BoundaryRef::Plane(xi)) => ReplayKind::Plane {
                measure: sim.measure(),
                atoms: sim.measure().atoms().iter().map(|a| m.isometry_of(&a.word)).collect(),
                atom_pi: sim.measure().atom_windings(sim.projection()),
                stream: StepStream::new(seed),
                tracker: OrbitTracker::default(),
                winding: AbelianVector::zeros(sim.projection().dim()),
                xi: *xi,
            },
            _ => return Err(Error::InvalidInput("boundary point does not belong to the model".into())),
        };
        Ok(Replay { kind, step: 0 })
    }

    pub fn step(&mut self) -> Result<()> {
        self.step += 1;
        match &mut self.kind {
            ReplayKind::Tree { walker, agree } => {
                let mut err = None;
                walker.step_with(|ev| {
                    if let Err(e) = agree.apply(ev) {
                        err.get_or_insert(e);
                    }
                });
                err.map_or(Ok(()), Err)
            }
            ReplayKind::Plane { measure, atoms, atom_pi, stream, tracker, winding, .. } => {
                let idx = measure.sample_index(stream.next_u64());
                tracker.mul_right(&atoms[idx]);
                *winding += &atom_pi[idx];
                Ok(())
            }
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn winding(&self) -> &AbelianVector {
        match &self.kind {
            ReplayKind::Tree { walker, .. } => walker.winding(),
            ReplayKind::Plane { winding, .. } => winding,
        }
    }

    /// `σ(w_k⁻¹, x) = h_x(w_k)`.
    pub fn cocycle(&self) -> f64 {
        match &self.kind {
            ReplayKind::Tree { walker, agree } => walker.word().len() as f64 - 2.0 * agree.agree() as f64,
            ReplayKind::Plane { tracker, xi, .. } => tracker.cocycle_of_inverse(*xi),
        }
    }

    pub fn martingale(&self, e_nu: &[f64], out: &mut Vec<f64>) {
        let s = self.cocycle();
        out.clear();
        out.extend(self.winding().0.iter().zip(e_nu).map(|(&p, e)| p as f64 - s * e));
    }
}

/// The martingale of a recorded path at each of its checkpoints.
pub fn martingale_series(sim: &Simulator, path: &crate::walk::PathRecord, x: &BoundaryRef, e_nu: &[f64]) -> Result<MartingaleSeries> {
    let steps: Vec<u64> = path.checkpoints.iter().map(|c| c.step).collect();
    martingale_series_at(sim, path.seed, &steps, x, e_nu)
}

/// The martingale of the path with `seed` at increasing `steps`.
pub fn martingale_series_at(sim: &Simulator, seed: u64, steps: &[u64], x: &BoundaryRef, e_nu: &[f64]) -> Result<MartingaleSeries> {
    if e_nu.len() != sim.projection().dim() {
        return Err(Error::InvalidInput(format!("drift has dimension {}, projection {}", e_nu.len(), sim.projection().dim())));
    }
    let mut r = Replay::new(sim, seed, x)?;
    let mut values = Vec::with_capacity(steps.len());
    let mut buf = Vec::new();
    for &k in steps {
        while r.steps_taken() < k {
            r.step()?;
        }
        r.martingale(e_nu, &mut buf);
        values.push(buf.clone());
    }
    Ok(MartingaleSeries { steps: steps.to_vec(), values, e_nu: e_nu.to_vec(), reference: reference_label(x) })
}

fn reference_label(x: &BoundaryRef) -> String {
    match x {
        BoundaryRef::Tree(xi) => format!("{xi:?}"),
        BoundaryRef::Plane(xi) => format!("angle {}", xi.angle()),
    }
}

/// Largest possible `‖ΔM‖_∞` in the tree model: every step moves `π` by at
/// most `L·max|π(letter)|` and `σ` by at most `L`.
pub fn increment_bound(mu: &StepMeasure, pi: &Projection, e_nu: &[f64]) -> f64 {
    let l = mu.max_step_length() as f64;
    let img = pi.images().iter().flat_map(|v| v.0.iter()).map(|a| a.abs()).max().unwrap_or(0) as f64;
    let e = e_nu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    l * (img + e)
}

/// Per-step statistics of a replayed martingale.
#[derive(Clone, Debug, Serialize)]
pub struct IncrementReport {
    pub paths: usize,
    pub horizon: u64,
    pub max_increment: f64,
    pub bound: f64,
    /// `(1/n) Σ E‖ΔM_k‖²` over the whole horizon.
    pub quadratic_variation_rate: f64,
    pub quadratic_variation_se: f64,
    /// Mean increment per history bin: bins are the sign patterns of `M_k`.
    pub bins: Vec<IncrementBin>,
    pub max_bin_z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct IncrementBin {
    pub pattern: String,
    pub count: u64,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Replays `paths` walks to `horizon` and checks the martingale property:
/// the mean of `ΔM_{k+1}` given the sign pattern of `M_k`, bounded
/// increments, and the quadratic variation rate.
pub fn increment_check(sim: &Simulator, x: &BoundaryRef, e_nu: &[f64], paths: usize, horizon: u64, seed: u64) -> Result<IncrementReport> {
    let d = sim.projection().dim();
    let nbins = 1usize << d;
    type Acc = (f64, RealMoments, Vec<Vec<RealMoments>>);
    let per_path: Vec<Acc> = (0..paths)
        .into_par_iter()
        .map(|i| -> Result<Acc> {
            let mut r = Replay::new(sim, path_seed(seed, i as u64), x)?;
            let mut prev = vec![0.0; d];
            let mut cur = Vec::with_capacity(d);
            let mut max_inc = 0.0f64;
            let mut qv = 0.0;
            let mut bins = vec![vec![RealMoments::default(); d]; nbins];
            for _ in 0..horizon {
                let pattern = prev.iter().enumerate().fold(0usize, |acc, (j, v)| acc | (usize::from(*v > 0.0) << j));
                r.step()?;
                r.martingale(e_nu, &mut cur);
                let mut sq = 0.0;
                for j in 0..d {
                    let inc = cur[j] - prev[j];
                    max_inc = max_inc.max(inc.abs());
                    sq += inc * inc;
                    bins[pattern][j].push(inc);
                }
                qv += sq;
                std::mem::swap(&mut prev, &mut cur);
            }
            Ok((max_inc, RealMoments::from_slice(&[qv / horizon.max(1) as f64]), bins))
        })
        .collect::<Result<_>>()?;
    let mut max_increment = 0.0f64;
    let mut qv = RealMoments::default();
    let mut bins = vec![vec![RealMoments::default(); d]; nbins];
    for (m, q, b) in &per_path {
        max_increment = max_increment.max(*m);
        qv.merge(q);
        for (acc, src) in bins.iter_mut().zip(b) {
            for (a, s) in acc.iter_mut().zip(src) {
                a.merge(s);
            }
        }
    }
    let mut max_bin_z = 0.0f64;
    let bins = bins
        .into_iter()
        .enumerate()
        .filter(|(_, b)| b[0].count > 1)
        .map(|(p, b)| {
            let pattern: String = (0..d).map(|j| if p >> j & 1 == 1 { '+' } else { '-' }).collect();
            // increments within a path are dependent; the path count gives
            // an honest effective sample size for the standard error
            let eff = (paths as f64).min(b[0].count as f64);
            let se: Vec<f64> = b.iter().map(|m| m.std_dev() / eff.sqrt()).collect();
            for (m, s) in b.iter().zip(&se) {
                if *s > 0.0 {
                    max_bin_z = max_bin_z.max(m.mean().abs() / s);
                }
            }
            IncrementBin { pattern, count: b[0].count, mean: b.iter().map(|m| m.mean()).collect(), se }
        })
        .collect();
    Ok(IncrementReport {
        paths,
        horizon,
        max_increment,
        bound: increment_bound(sim.measure(), sim.projection(), e_nu),
        quadratic_variation_rate: qv.mean(),
        quadratic_variation_se: qv.std_error(),
        bins,
        max_bin_z,
    })
}

/// Limit points of independent walks, reusable across reference points.
pub fn boundary_sample_bank(mu: &StepMeasure, count: usize, seed: u64, horizon: u64, rule: StabilizationRule) -> Result<Vec<BoundaryWord>> {
    (0..count).into_par_iter().map(|i| limit_boundary_point(mu, path_seed(seed, i as u64), horizon, rule)).collect()
}

pub const MIN_PSI_SAMPLES: usize = 100;
/// Gromov products are read up to this many letters.
pub const PSI_TRUNCATION: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PsiEstimate {
    pub value: f64,
    pub se: f64,
    pub samples: usize,
    /// Samples whose product reached the truncation.
    pub truncated: usize,
    pub warning: Option<String>,
}

/// `ψ(x) = ∫ (x|y) dν(y)` by Monte Carlo over the sample bank.
pub fn estimate_psi(x: &BoundaryWord, samples: &[BoundaryWord]) -> Result<PsiEstimate> {
    if samples.len() < MIN_PSI_SAMPLES {
        return Err(Error::InsufficientData(format!("{} boundary samples, need {MIN_PSI_SAMPLES}", samples.len())));
    }
    let mut m = RealMoments::default();
    let mut truncated = 0;
    for y in samples {
        let g = gromov_product_capped(x, y, PSI_TRUNCATION)?;
        if g >= PSI_TRUNCATION {
            truncated += 1;
        }
        m.push(g as f64);
    }
    let warning = (truncated > 0).then(|| format!("{truncated} Gromov products truncated at {PSI_TRUNCATION}"));
    Ok(PsiEstimate { value: m.mean(), se: m.std_error(), samples: samples.len(), truncated, warning })
}

/// With `ψ = ∫(·|y)dν`, the cocycle `σ₀ = σ - c(ψ∘γ - ψ)` has constant
/// `μ̌`-drift `λ` exactly when `c = 2` (the Gromov product counts common
/// prefix letters, half the distance scale of `σ`).
pub const PSI_SCALE: f64 = 2.0;

#[derive(Clone, Debug, Serialize)]
pub struct PsiDriftCheck {
    pub reference: String,
    /// `Σ_γ μ(γ) σ(γ⁻¹, x)`.
    pub raw_drift: f64,
    /// `Σ_γ μ(γ) σ₀(γ⁻¹, x)` with `σ₀ = σ - 2(ψ∘γ - ψ)`.
    pub corrected_drift: f64,
    pub corrected_se: f64,
    pub lambda: f64,
    pub z: f64,
}

/// Checks the cohomology `σ = σ₀ + ψ∘γ - ψ` through its defining property:
/// `σ₀` must have the same `μ̌`-drift `λ` at every `x`, while the raw
/// cocycle need not. Both `ψ` values are Monte Carlo over `bank`.
pub fn psi_drift_check(
    mu: &StepMeasure,
    xs: &[BoundaryWord],
    bank: &[BoundaryWord],
    lambda: f64,
    lambda_se: f64,
) -> Result<Vec<PsiDriftCheck>> {
    xs.iter()
        .map(|x| {
            let psi_x = estimate_psi(x, bank)?;
            let mut raw = 0.0;
            let mut corrected = 0.0;
            let mut var = psi_x.se.powi(2) * PSI_SCALE.powi(2);
            for a in mu.atoms() {
                let inv = a.word.invert();
                let s = busemann_cocycle(&inv, x)? as f64;
                let psi_gx = estimate_psi(&x.translate(&inv)?, bank)?;
                raw += a.prob * s;
                corrected += a.prob * (s - PSI_SCALE * (psi_gx.value - psi_x.value));
                var += (a.prob * PSI_SCALE * psi_gx.se).powi(2);
            }
            let se = (var + lambda_se * lambda_se).sqrt();
            Ok(PsiDriftCheck {
                reference: format!("{x:?}"),
                raw_drift: raw,
                corrected_drift: corrected,
                corrected_se: se,
                lambda,
                z: (corrected - lambda) / se,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct FosterRow {
    pub threshold: f64,
    pub mean_tau: f64,
    pub se: f64,
    pub hits: usize,
    pub censored: usize,
    /// `mean τ_s > s + 3·SE`.
    pub exceeds: bool,
    /// Wald's identity gives `E τ_s = (sλ + E[overshoot])/λ`.
    pub wald_bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FosterReport {
    pub rows: Vec<FosterRow>,
    pub monotone: bool,
    pub pass: bool,
}

/// Mean exit times against the threshold `s`.
pub fn foster_check(dataset: &Dataset, max_step_length: usize) -> FosterReport {
    let spec = &dataset.config.stopping;
    let rows: Vec<FosterRow> = spec
        .thresholds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut m = RealMoments::default();
            let mut censored = 0;
            for p in &dataset.paths {
                match p.stops[i].tau {
                    Some(t) => m.push(t as f64),
                    None => censored += 1,
                }
            }
            let exceeds = m.mean() > s + 3.0 * m.std_error();
            FosterRow {
                threshold: s,
                mean_tau: m.mean(),
                se: m.std_error(),
                hits: m.count as usize,
                censored,
                exceeds,
                wald_bound: s + max_step_length as f64 / spec.lambda_ref,
            }
        })
        .collect();
    let monotone = rows.windows(2).all(|w| w[0].mean_tau <= w[1].mean_tau);
    let pass = monotone && rows.iter().all(|r| !r.exceeds && r.censored == 0);
    FosterReport { rows, monotone, pass }
}

#[derive(Clone, Debug, Serialize)]
pub struct OvershootRow {
    pub threshold: f64,
    /// Counts of `t_{τ_s} - sλ_ref` in unit bins starting at 0.
    pub histogram: Vec<u64>,
    pub max: f64,
    pub p99: f64,
    pub within_support_bound: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OvershootReport {
    pub rows: Vec<OvershootRow>,
    pub support_bound: f64,
    /// Spread of the 99th percentiles across thresholds.
    pub p99_spread: f64,
    pub band: f64,
    pub tight: bool,
}

pub fn overshoot_stats(dataset: &Dataset, max_step_length: usize, band: f64) -> OvershootReport {
    let spec = &dataset.config.stopping;
    let rows: Vec<OvershootRow> = spec
        .thresholds
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut over: Vec<f64> = dataset.paths.iter().filter_map(|p| p.stops[i].length).map(|t| t - spec.radius(i)).collect();
            over.sort_by(f64::total_cmp);
            let max = over.last().copied().unwrap_or(0.0);
            let mut histogram = vec![0u64; max.max(0.0).floor() as usize + 1];
            for o in &over {
                histogram[o.max(0.0).floor() as usize] += 1;
            }
            OvershootRow {
                threshold: s,
                histogram,
                max,
                p99: quantile_sorted(&over, 0.99),
                within_support_bound: over.first().is_none_or(|&o| o >= 0.0) && max <= max_step_length as f64,
            }
        })
        .collect();
    let p99s: Vec<f64> = rows.iter().map(|r| r.p99).filter(|v| v.is_finite()).collect();
    let p99_spread = p99s.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - p99s.iter().cloned().fold(f64::INFINITY, f64::min);
    let p99_spread = if p99s.is_empty() { 0.0 } else { p99_spread };
    OvershootReport { tight: p99_spread < band || p99s.len() < 2, rows, support_bound: max_step_length as f64, p99_spread, band }
}

#[derive(Clone, Debug, Serialize)]
pub struct TimeControlReport {
    /// Calibrated on the smallest threshold as the given quantile of
    /// `|τ_s - s|/√s`.
    pub r: f64,
    pub fractions: Vec<(f64, f64)>,
    pub spread: f64,
    pub band: f64,
    pub stable: bool,
}

/// Fraction of paths with `|τ_s - s| <= R√s` for each threshold.
pub fn time_control(dataset: &Dataset, quantile: f64, band: f64) -> Result<TimeControlReport> {
    let spec = &dataset.config.stopping;
    if spec.thresholds.is_empty() {
        return Err(Error::InsufficientData("no stopping thresholds".into()));
    }
    let scaled = |i: usize| -> Vec<f64> {
        let s = spec.thresholds[i];
        dataset.paths.iter().filter_map(|p| p.stops[i].tau).map(|t| (t as f64 - s).abs() / s.sqrt()).collect()
    };
    let mut first = scaled(0);
    first.sort_by(f64::total_cmp);
    let r = quantile_sorted(&first, quantile);
    let fractions: Vec<(f64, f64)> = (0..spec.thresholds.len())
        .map(|i| {
            let total = dataset.paths.len() as f64;
            let inside = scaled(i).iter().filter(|&&v| v <= r).count() as f64;
            (spec.thresholds[i], inside / total)
        })
        .collect();
    let hi = fractions.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = fractions.iter().map(|f| f.1).fold(f64::INFINITY, f64::min);
    Ok(TimeControlReport { r, spread: hi - lo, band, stable: hi - lo <= band, fractions })
}

#[derive(Clone, Debug, Serialize)]
pub struct XControlRow {
    pub n: u64,
    /// `(ε, R(ε))` with `P(|σ(g,x) - σ(g,y)| > R) <= ε`.
    pub radii: Vec<(f64, f64)>,
    pub max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct XControlReport {
    pub pair: (String, String),
    pub rows: Vec<XControlRow>,
    /// `R(ε)` at the largest `n` is within one unit of its value at the
    /// previous `n` for every `ε`.
    pub stable: bool,
}

/// Distribution of `|σ(g,x) - σ(g,y)|` for `g ~ μ^{*n}` (tree model).
pub fn x_control_check(
    mu: &StepMeasure,
    n_list: &[u64],
    pairs: &[(BoundaryWord, BoundaryWord)],
    eps: &[f64],
    samples: usize,
    seed: u64,
) -> Result<Vec<XControlReport>> {
    if !mu.geometry().is_tree() {
        return Err(Error::InvalidInput("x_control_check is tree-only".into()));
    }
    let pi = Projection::canonical(mu.rank());
    let measure = Arc::new(mu.clone());
    let atom_pi = Arc::new(mu.atom_windings(&pi));
    pairs
        .iter()
        .map(|(x, y)| {
            let rows = n_list
                .iter()
                .map(|&n| -> Result<XControlRow> {
                    let mut diffs: Vec<f64> = (0..samples)
                        .into_par_iter()
                        .map(|i| -> Result<f64> {
                            let mut w = TreeWalker::new(measure.clone(), atom_pi.clone(), path_seed(seed ^ n, i as u64));
                            for _ in 0..n {
                                w.step();
                            }
                            let g = w.word();
                            Ok((busemann_cocycle(g, x)? - busemann_cocycle(g, y)?).abs() as f64)
                        })
                        .collect::<Result<_>>()?;
                    diffs.sort_by(f64::total_cmp);
                    let mut radii: Vec<(f64, f64)> = eps.iter().map(|&e| (e, quantile_sorted(&diffs, 1.0 - e))).collect();
                    radii.sort_by(|a, b| a.0.total_cmp(&b.0));
                    Ok(XControlRow { n, radii, max: diffs.last().copied().unwrap_or(0.0) })
                })
                .collect::<Result<Vec<_>>>()?;
            let stable = rows.len() < 2 || {
                let (a, b) = (&rows[rows.len() - 2], &rows[rows.len() - 1]);
                a.radii.iter().zip(&b.radii).all(|(p, q)| (p.1 - q.1).abs() <= 1.0)
            };
            Ok(XControlReport { pair: (format!("{x:?}"), format!("{y:?}")), rows, stable })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitReport {
    pub k: f64,
    pub l: f64,
    pub s: f64,
    pub horizon: f64,
    pub upper: usize,
    pub lower: usize,
    /// Still inside the window at the horizon.
    pub censored: usize,
    /// Series that ended before the horizon without exiting; excluded.
    pub short: usize,
    pub upper_frequency: f64,
    pub se: f64,
    pub target: f64,
    pub per_path: Vec<(ExitSide, f64)>,
}

impl ExitReport {
    pub fn from_outcomes(k: f64, l: f64, s: f64, horizon: f64, outcomes: Vec<(ExitSide, f64)>, short: usize) -> ExitReport {
        let upper = outcomes.iter().filter(|o| o.0 == ExitSide::Upper).count();
        let lower = outcomes.iter().filter(|o| o.0 == ExitSide::Lower).count();
        let censored = outcomes.len() - upper - lower;
        let exited = (upper + lower).max(1) as f64;
        let p = upper as f64 / exited;
        ExitReport {
            k,
            l,
            s,
            horizon,
            upper,
            lower,
            censored,
            short,
            upper_frequency: p,
            se: (p * (1.0 - p) / exited).sqrt(),
            target: k / (k + l),
            per_path: outcomes,
        }
    }

    pub fn censored_fraction(&self) -> f64 {
        self.censored as f64 / (self.upper + self.lower + self.censored).max(1) as f64
    }
}

/// First exits of `φ(M_t)` from `[-k·s, l·s]` within `s³` steps.
pub fn exit_statistics(series: &[MartingaleSeries], functional: &[f64], k: f64, l: f64, s: f64) -> Result<ExitReport> {
    let horizon = s.powi(3);
    let mut outcomes = Vec::new();
    let mut short = 0;
    for m in series {
        if m.values.first().is_some_and(|v| v.len() != functional.len()) {
            return Err(Error::InvalidInput("functional dimension does not match the series".into()));
        }
        let mut tr = ExitTracker::new(k, l, s, horizon);
        let mut done = false;
        for (t, v) in m.steps.iter().zip(&m.values) {
            let y: f64 = v.iter().zip(functional).map(|(a, b)| a * b).sum();
            if tr.observe(*t as f64, y) {
                done = true;
                break;
            }
        }
        if done {
            outcomes.push(tr.finish(horizon));
        } else {
            short += 1;
        }
    }
    Ok(ExitReport::from_outcomes(k, l, s, horizon, outcomes, short))
}

/// Streaming version of [`exit_statistics`]: replays each path only until
/// it exits, never storing the series.
pub fn martingale_exits(
    sim: &Simulator,
    x: &BoundaryRef,
    e_nu: &[f64],
    functional: &[f64],
    (k, l, s): (f64, f64, f64),
    paths: usize,
    seed: u64,
) -> Result<ExitReport> {
    let horizon = s.powi(3);
    let outcomes: Vec<(ExitSide, f64)> = (0..paths)
        .into_par_iter()
        .map(|i| -> Result<(ExitSide, f64)> {
            let mut r = Replay::new(sim, path_seed(seed, i as u64), x)?;
            let mut tr = ExitTracker::new(k, l, s, horizon);
            let mut buf = Vec::new();
            loop {
                r.step()?;
                r.martingale(e_nu, &mut buf);
                let y: f64 = buf.iter().zip(functional).map(|(a, b)| a * b).sum();
                let t = r.steps_taken() as f64;
                if tr.observe(t, y) {
                    return Ok(tr.finish(t));
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok(ExitReport::from_outcomes(k, l, s, horizon, outcomes, 0))
}

/// Stopping spec driven by the drift-normalized length cocycle `t_k/λ_ref`.
pub fn normalized_spec(thresholds: Vec<f64>, lambda_ref: f64) -> Result<StoppingSpec> {
    StoppingSpec::new(thresholds, lambda_ref)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::{ReferencePoint, SimConfig};

    fn srw() -> StepMeasure {
        StepMeasure::simple_random_walk(Geometry::Tree { rank: 2 }).unwrap()
    }

    fn anu() -> StepMeasure {
        let t = 1.0 / 3.0;
        StepMeasure::new(
            vec![("u".parse().unwrap(), t), ("uv".parse().unwrap(), t), ("uV".parse().unwrap(), t)],
            Geometry::Tree { rank: 2 },
        )
        .unwrap()
    }

    fn sim(mu: StepMeasure, n: u64, paths: usize) -> Simulator {
        Simulator::new(mu, Projection::canonical(2), SimConfig::new(n, paths, 3)).unwrap()
    }

    fn xref(p: &str) -> BoundaryRef {
        BoundaryRef::Tree(ReferencePoint::periodic(p).unwrap().boundary_word().unwrap())
    }

    #[test]
    fn cocycle_handle_self_test() {
        let g = Geometry::Tree { rank: 2 };
        CocycleHandle::new(g.clone(), Projection::canonical(2), vec![0.6, 0.0], &xref("uv")).unwrap();
        let m = Arc::new(crate::plane::SchottkyModel::symmetric(2, 4.0).unwrap());
        let x = BoundaryRef::Plane(CircleBoundaryPoint::from_angle(0.3));
        assert!(CocycleHandle::new(Geometry::Plane(m), Projection::canonical(2), vec![0.1, -0.2], &x).is_ok());
    }

    #[test]
    fn zero_drift_is_the_abelian_walk() {
        let s = sim(srw(), 200, 1);
        let p = s.sample_indexed(0).unwrap();
        let m = martingale_series(&s, &p, &xref("u"), &[0.0, 0.0]).unwrap();
        for (c, v) in p.checkpoints.iter().zip(&m.values) {
            assert_eq!(c.winding.to_f64(), *v);
        }
    }

    #[test]
    fn replay_cocycle_matches_direct_evaluation() {
        let s = sim(anu(), 50, 1);
        let x = xref("uV");
        let BoundaryRef::Tree(xi) = &x else { unreachable!() };
        let mut r = Replay::new(&s, 9, &x).unwrap();
        let mut w = s.tree_walker(9);
        for _ in 0..50 {
            r.step().unwrap();
            w.step();
            assert_eq!(r.cocycle(), busemann_cocycle(&w.word().invert(), xi).unwrap() as f64);
        }
    }

    #[test]
    fn increments_bounded() {
        let s = sim(anu(), 10, 1);
        let rep = increment_check(&s, &xref("u"), &[0.6, 0.0], 50, 300, 1).unwrap();
        assert!(rep.max_increment <= rep.bound + 1e-12, "{rep:?}");
        assert_eq!(rep.bound, 2.0 * (1.0 + 0.6));
    }

    #[test]
    fn deterministic_foster() {
        let mu = StepMeasure::new(vec![("u".parse().unwrap(), 1.0)], Geometry::Tree { rank: 2 }).unwrap();
        let mut cfg = SimConfig::new(100, 3, 1);
        cfg.stopping = StoppingSpec::new(vec![2.5, 10.0, 40.0], 1.0).unwrap();
        let ds = Simulator::new(mu, Projection::canonical(2), cfg).unwrap().batch_run(1).unwrap();
        let r = foster_check(&ds, 1);
        let means: Vec<f64> = r.rows.iter().map(|r| r.mean_tau).collect();
        assert_eq!(means, vec![3.0, 10.0, 40.0]);
        assert!(r.monotone);
        let o = overshoot_stats(&ds, 1, 1.0);
        assert!(o.rows.iter().all(|r| r.within_support_bound));
        assert_eq!(o.rows[0].max, 0.5);
    }

    #[test]
    fn empty_threshold_overshoot() {
        let ds = sim(srw(), 10, 2).batch_run(1).unwrap();
        let o = overshoot_stats(&ds, 1, 1.0);
        assert!(o.rows.is_empty() && o.tight);
    }

    #[test]
    fn x_control_identical_points() {
        let x = ReferencePoint::periodic("uv").unwrap().boundary_word().unwrap();
        let r = x_control_check(&srw(), &[10, 100], &[(x.clone(), x)], &[0.1, 0.01], 200, 1).unwrap();
        assert!(r[0].rows.iter().all(|row| row.max == 0.0));
    }

    #[test]
    fn x_control_radius_monotone_in_eps() {
        let x = ReferencePoint::periodic("u").unwrap().boundary_word().unwrap();
        let y = ReferencePoint::periodic("v").unwrap().boundary_word().unwrap();
        let r = x_control_check(&srw(), &[10, 100, 1000], &[(x, y)], &[0.2, 0.05, 0.01], 2000, 1).unwrap();
        for row in &r[0].rows {
            assert!(row.radii.windows(2).all(|w| w[0].1 >= w[1].1), "{row:?}");
        }
        assert!(r[0].stable, "{r:?}");
    }

    #[test]
    fn psi_needs_samples() {
        let x = ReferencePoint::periodic("u").unwrap().boundary_word().unwrap();
        assert!(estimate_psi(&x, std::slice::from_ref(&x)).is_err());
        let bank = vec![x.clone(); 100];
        let e = estimate_psi(&x, &bank).unwrap();
        assert_eq!(e.truncated, 100);
        assert!(e.warning.is_some());
    }

    #[test]
    fn exit_series() {
        let m = MartingaleSeries {
            steps: vec![1, 2, 3],
            values: vec![vec![1.0], vec![2.5], vec![-1.0]],
            e_nu: vec![0.0],
            reference: String::new(),
        };
        let r = exit_statistics(std::slice::from_ref(&m), &[1.0], 1.0, 1.0, 2.0).unwrap();
        assert_eq!((r.upper, r.lower), (1, 0));
        let r = exit_statistics(&[m], &[-1.0], 1.0, 1.0, 2.0).unwrap();
        assert_eq!((r.upper, r.lower), (0, 1));
    }
}
