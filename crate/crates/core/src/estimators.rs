//! Estimators for the escape rate, the winding drift `e_ν`, the limit
//! covariance `A_ν` (formula and ray routes), and the non-degeneracy
//! certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{AbelianVector, Projection};
use crate::measure::{semigroup_products, Geometry, StepMeasure};
use crate::plane::translation_length;
use crate::stats::{
    covariance_standard_errors, linear_fit, matrix_to_rows, normal_quantile, sample_covariance, symmetric_eigenvalues, RealMoments,
};
use crate::walk::Dataset;

/// An exact fraction with positive denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rational {
    pub num: i128,
    pub den: i128,
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Rational {
    pub const ZERO: Rational = Rational { num: 0, den: 1 };

    pub fn new(num: i128, den: i128) -> Rational {
        assert!(den != 0, "zero denominator");
        let g = gcd(num, den).max(1) * den.signum();
        Rational { num: num / g, den: den / g }
    }

    pub fn from_int(v: i64) -> Rational {
        Rational { num: v as i128, den: 1 }
    }

    /// Best approximation with denominator at most `max_den`, accepted
    /// only within `tol`.
    pub fn approximate(x: f64, max_den: i128, tol: f64) -> Option<Rational> {
        let (mut h0, mut h1, mut k0, mut k1) = (0i128, 1i128, 1i128, 0i128);
        let mut r = x;
        for _ in 0..64 {
            let a = r.floor();
            let ai = a as i128;
            let (h2, k2) = (ai * h1 + h0, ai * k1 + k0);
            if k2 > max_den {
                break;
            }
            (h0, h1, k0, k1) = (h1, h2, k1, k2);
            if (x - h1 as f64 / k1 as f64).abs() <= tol {
                return Some(Rational::new(h1, k1));
            }
            let frac = r - a;
            if frac.abs() < 1e-300 {
                break;
            }
            r = 1.0 / frac;
        }
        None
    }

    pub fn is_zero(self) -> bool {
        self.num == 0
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::ops::Add for Rational {
    type Output = Rational;
    fn add(self, o: Rational) -> Rational {
        Rational::new(self.num * o.den + o.num * self.den, self.den * o.den)
    }
}

impl std::ops::Sub for Rational {
    type Output = Rational;
    fn sub(self, o: Rational) -> Rational {
        self + Rational { num: -o.num, den: o.den }
    }
}

impl std::ops::Mul for Rational {
    type Output = Rational;
    fn mul(self, o: Rational) -> Rational {
        Rational::new(self.num * o.num, self.den * o.den)
    }
}

impl std::fmt::Display for Rational {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AbelianMoments {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Exact values when every probability is a fraction with denominator
    /// at most 10⁶.
    pub exact_mean: Option<Vec<Rational>>,
    pub exact_covariance: Option<Vec<Vec<Rational>>>,
    pub exact_determinant: Option<Rational>,
}

impl AbelianMoments {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        crate::stats::rows_to_matrix(&self.covariance)
    }
}

const RATIONAL_MAX_DEN: i128 = 1_000_000;

/// `E(μ_ab)` and `Cov(μ_ab)`.
pub fn exact_abelian_moments(mu: &StepMeasure, pi: &Projection) -> AbelianMoments {
    let d = pi.dim();
    let vs: Vec<AbelianVector> = mu.atom_windings(pi);
    let ps: Vec<f64> = mu.atoms().iter().map(|a| a.prob).collect();
    let mut mean = vec![0.0; d];
    for (v, p) in vs.iter().zip(&ps) {
        for i in 0..d {
            mean[i] += p * v.0[i] as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for (v, p) in vs.iter().zip(&ps) {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += p * (v.0[i] as f64 - mean[i]) * (v.0[j] as f64 - mean[j]);
            }
        }
    }

    let rationals: Option<Vec<Rational>> = ps.iter().map(|&p| Rational::approximate(p, RATIONAL_MAX_DEN, 1e-13)).collect();
    let (exact_mean, exact_covariance, exact_determinant) = match rationals {
        Some(rs) => {
            let mut m = vec![Rational::ZERO; d];
            for (v, r) in vs.iter().zip(&rs) {
                for i in 0..d {
                    m[i] = m[i] + *r * Rational::from_int(v.0[i]);
                }
            }
            let mut c = vec![vec![Rational::ZERO; d]; d];
            for (v, r) in vs.iter().zip(&rs) {
                for i in 0..d {
                    for j in 0..d {
                        let a = Rational::from_int(v.0[i]) - m[i];
                        let b = Rational::from_int(v.0[j]) - m[j];
                        c[i][j] = c[i][j] + *r * a * b;
                    }
                }
            }
            let det = rational_determinant(&c);
            (Some(m), Some(c), det)
        }
        None => (None, None, None),
    };
    AbelianMoments { mean, covariance: cov, exact_mean, exact_covariance, exact_determinant }
}

/// Fraction-exact Gaussian elimination; `None` on overflow-prone sizes.
fn rational_determinant(m: &[Vec<Rational>]) -> Option<Rational> {
    let n = m.len();
    if n > 6 {
        return None;
    }
    let mut a: Vec<Vec<Rational>> = m.to_vec();
    let mut det = Rational::from_int(1);
    for col in 0..n {
        let Some(piv) = (col..n).find(|&r| !a[r][col].is_zero()) else {
            return Some(Rational::ZERO);
        };
        if piv != col {
            a.swap(piv, col);
            det = det * Rational::from_int(-1);
        }
        let p = a[col][col];
        det = det * p;
        for r in col + 1..n {
            let f = Rational::new(a[r][col].num * p.den, a[r][col].den * p.num);
            for c in col..n {
                a[r][c] = a[r][c] - f * a[col][c];
            }
        }
    }
    Some(det)
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftEstimate {
    pub lambda: f64,
    pub se: f64,
    pub n: u64,
    pub paths: usize,
    /// Mean per-path least squares slope of `t_k` over the second half.
    pub slope_lambda: f64,
    pub slope_se: f64,
    pub disagreement: bool,
    pub e_nu: Vec<f64>,
    pub e_nu_se: Vec<f64>,
}

/// `λ̂ = mean t_n/n`, a slope cross-check, and `e_ν = λ̂⁻¹E(μ_ab)`.
pub fn estimate_lambda(dataset: &Dataset, mean_ab: &[f64]) -> Result<DriftEstimate> {
    let n = dataset.horizon();
    if dataset.paths.is_empty() || n == 0 {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    let mut m = RealMoments::default();
    let mut slopes = RealMoments::default();
    for p in &dataset.paths {
        m.push(p.final_checkpoint().length / n as f64);
        let (x, y): (Vec<f64>, Vec<f64>) = p.checkpoints.iter().filter(|c| 2 * c.step >= n).map(|c| (c.step as f64, c.length)).unzip();
        if x.len() >= 2 {
            slopes.push(linear_fit(&x, &y)?.slope);
        }
    }
    let lambda = m.mean();
    if !(lambda > 0.0) {
        return Err(Error::Numerical(format!("escape rate estimate {lambda} is not positive")));
    }
    let se = m.std_error();
    let (slope_lambda, slope_se) = if slopes.count > 1 { (slopes.mean(), slopes.std_error()) } else { (lambda, f64::INFINITY) };
    let disagreement = (lambda - slope_lambda).abs() > 3.0 * (se * se + slope_se * slope_se).sqrt();
    let e_nu = mean_ab.iter().map(|e| e / lambda).collect();
    let e_nu_se = mean_ab.iter().map(|e| e.abs() * se / (lambda * lambda)).collect();
    Ok(DriftEstimate { lambda, se, n, paths: dataset.paths.len(), slope_lambda, slope_se, disagreement, e_nu, e_nu_se })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub matrix: Vec<Vec<f64>>,
    pub samples: usize,
    pub se: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Two-sided 99% interval for the smallest eigenvalue.
    pub min_eigenvalue_ci: (f64, f64),
}

impl CovarianceEstimate {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        crate::stats::rows_to_matrix(&self.matrix)
    }

    pub fn se_matrix(&self) -> DMatrix<f64> {
        crate::stats::rows_to_matrix(&self.se)
    }

    /// `‖SE‖_F`, the scale used for Frobenius comparisons.
    pub fn frobenius_se(&self) -> f64 {
        self.se_matrix().norm()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let m = self.to_matrix();
        (&m - m.transpose()).amax() <= tol
    }
}

/// Builds an estimate of `E[X Xᵀ]·scale` (or the sample covariance times
/// `scale` when `centered`) from rows `X`, with the smallest eigenvalue
/// interval from its per-sample linearization `(vᵀX)²`.
fn covariance_from_rows(rows: &[Vec<f64>], scale: f64, centered: bool) -> Result<CovarianceEstimate> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} samples")));
    }
    let d = rows[0].len();
    let (mean, cov) = sample_covariance(rows);
    let center = if centered { mean } else { vec![0.0; d] };
    let m = if centered {
        cov * scale
    } else {
        let mut s = DMatrix::zeros(d, d);
        for r in rows {
            let v = DVector::from_column_slice(r);
            s += &v * v.transpose();
        }
        s * (scale / n as f64)
    };
    let se = covariance_standard_errors(rows, &center) * scale;
    let eig = nalgebra::SymmetricEigen::new((&m + m.transpose()) * 0.5);
    let (imin, lmin) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |a, (i, &l)| if l < a.1 { (i, l) } else { a });
    let v = eig.eigenvectors.column(imin);
    let proj: Vec<f64> = rows
        .iter()
        .map(|r| {
            let y: f64 = r.iter().zip(&center).zip(v.iter()).map(|((a, c), w)| (a - c) * w).sum();
            y * y * scale
        })
        .collect();
    let lse = RealMoments::from_slice(&proj).std_error();
    let z = normal_quantile(0.995);
    Ok(CovarianceEstimate {
        eigenvalues: symmetric_eigenvalues(&m),
        matrix: matrix_to_rows(&m),
        samples: n,
        se: matrix_to_rows(&se),
        min_eigenvalue_ci: (lmin - z * lse, lmin + z * lse),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FormulaEstimate {
    pub n: u64,
    pub lambda: f64,
    pub per_reference: Vec<(String, CovarianceEstimate)>,
    /// Estimate at the first reference point.
    pub estimate: CovarianceEstimate,
    /// Largest pairwise Frobenius distance across reference points.
    pub cross_x_spread: f64,
    /// `3·sqrt(SE_a² + SE_b²)` for the pair attaining the spread.
    pub spread_threshold: f64,
    pub uniformity_violation: bool,
}

/// `(1/(nλ̂))·mean (π(w_n) - σ(w_n⁻¹, x)e)(·)ᵀ` for every recorded
/// reference point, from checkpoint `n` of a tree dataset.
pub fn estimate_anu_formula(dataset: &Dataset, n: u64, e_nu: &[f64], lambda: f64) -> Result<FormulaEstimate> {
    if !dataset.tree {
        return Err(Error::InvalidInput("the formula route needs reference Gromov products (tree model)".into()));
    }
    if dataset.config.references.is_empty() {
        return Err(Error::InvalidInput("dataset has no reference points".into()));
    }
    if e_nu.len() != dataset.dim {
        return Err(Error::InvalidInput("drift dimension mismatch".into()));
    }
    let mut per_reference = Vec::new();
    for (j, r) in dataset.config.references.iter().enumerate() {
        let rows: Vec<Vec<f64>> = dataset
            .paths
            .iter()
            .map(|p| {
                let c = p.checkpoint_at(n).ok_or_else(|| Error::InvalidInput(format!("no checkpoint at step {n}")))?;
                let sigma = c.length - 2.0 * c.ref_products[j] as f64;
                Ok(c.winding.0.iter().zip(e_nu).map(|(&w, e)| w as f64 - sigma * e).collect())
            })
            .collect::<Result<_>>()?;
        per_reference.push((r.to_string(), covariance_from_rows(&rows, 1.0 / (n as f64 * lambda), false)?));
    }
    let mut cross_x_spread = 0.0;
    let mut spread_threshold = f64::INFINITY;
    let mut violation = false;
    for a in 0..per_reference.len() {
        for b in a + 1..per_reference.len() {
            let (ea, eb) = (&per_reference[a].1, &per_reference[b].1);
            let dist = (ea.to_matrix() - eb.to_matrix()).norm();
            let thr = 3.0 * (ea.frobenius_se().powi(2) + eb.frobenius_se().powi(2)).sqrt();
            if dist > thr {
                violation = true;
            }
            if dist > cross_x_spread || (a == 0 && b == 1) {
                cross_x_spread = dist;
                spread_threshold = thr;
            }
        }
    }
    let estimate = per_reference[0].1.clone();
    Ok(FormulaEstimate { n, lambda, per_reference, estimate, cross_x_spread, spread_threshold, uniformity_violation: violation })
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityDiagnostic {
    pub steps: Vec<u64>,
    pub max_z: f64,
    pub stable: bool,
}

/// Formula estimates at `n, 2n, 4n, …` agree entrywise within 3 joint SE.
pub fn formula_stability(dataset: &Dataset, steps: &[u64], e_nu: &[f64], lambda: f64) -> Result<StabilityDiagnostic> {
    let ests: Vec<CovarianceEstimate> =
        steps.iter().map(|&n| Ok(estimate_anu_formula(dataset, n, e_nu, lambda)?.estimate)).collect::<Result<_>>()?;
    let max_z = ests.windows(2).map(|w| max_entry_z(&w[0], &w[1])).fold(0.0, f64::max);
    Ok(StabilityDiagnostic { steps: steps.to_vec(), max_z, stable: max_z <= 3.0 })
}

/// Largest `|a_ij - b_ij| / sqrt(se_a² + se_b²)`.
pub fn max_entry_z(a: &CovarianceEstimate, b: &CovarianceEstimate) -> f64 {
    let (ma, mb, sa, sb) = (a.to_matrix(), b.to_matrix(), a.se_matrix(), b.se_matrix());
    let mut z = 0.0f64;
    for i in 0..ma.nrows() {
        for j in 0..ma.ncols() {
            let s = (sa[(i, j)].powi(2) + sb[(i, j)].powi(2)).sqrt();
            let diff = (ma[(i, j)] - mb[(i, j)]).abs();
            if s > 0.0 {
                z = z.max(diff / s);
            } else if diff > 1e-12 {
                z = f64::INFINITY;
            }
        }
    }
    z
}

/// Centered sample covariance of `(i∘r_ξ(t) - t·e)/√t` at ray time `t`.
pub fn estimate_anu_empirical(dataset: &Dataset, t: f64, e_nu: &[f64]) -> Result<CovarianceEstimate> {
    let rows = ray_samples(dataset, t, e_nu)?;
    covariance_from_rows(&rows, 1.0, true)
}

/// `(i∘r_ξ(t) - t·e)/√t` for every path with a ray winding at `t`.
pub fn ray_samples(dataset: &Dataset, t: f64, e_nu: &[f64]) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = dataset
        .paths
        .iter()
        .filter_map(|p| p.ray_winding_at(t))
        .map(|w| w.0.iter().zip(e_nu).map(|(&a, e)| (a as f64 - t * e) / t.sqrt()).collect())
        .collect();
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("no ray windings at t = {t}")));
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct RouteComparison {
    pub max_z: f64,
    pub agree: bool,
}

pub fn compare_routes(formula: &CovarianceEstimate, empirical: &CovarianceEstimate) -> RouteComparison {
    let max_z = max_entry_z(formula, empirical);
    RouteComparison { max_z, agree: max_z <= 3.0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Nondegenerate,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct Equation {
    pub word: String,
    pub winding: Vec<i64>,
    pub stable_length: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    pub verdict: Verdict,
    pub span_rank: usize,
    pub dim: usize,
    pub equations: usize,
    pub residual: f64,
    pub threshold: f64,
    /// Least squares `φ`; an exact solution when inconclusive.
    pub phi: Vec<f64>,
    /// A minimal inconsistent subsystem when non-degenerate.
    pub witness: Vec<Equation>,
}

const TREE_RESIDUAL_TOL: f64 = 1e-6;
const PLANE_RESIDUAL_TOL: f64 = 1e-4;
const MAX_CERT_PRODUCTS: usize = 20_000;

/// Searches for an obstruction to `φ∘π = ℓ` on the semigroup generated by
/// the support.
pub fn nondegeneracy_certificate(mu: &StepMeasure, pi: &Projection, search_length: usize) -> Result<Certificate> {
    let d = pi.dim();
    let support: Vec<Vec<f64>> = mu.atom_windings(pi).iter().map(|v| v.to_f64()).collect();
    let span = DMatrix::from_fn(support.len(), d, |i, j| support[i][j]);
    let span_rank = span.rank(1e-9);

    let products = semigroup_products(mu, search_length.max(1), MAX_CERT_PRODUCTS);
    let threshold = if mu.geometry().is_tree() { TREE_RESIDUAL_TOL } else { PLANE_RESIDUAL_TOL };
    let mut eqs = Vec::new();
    for w in &products {
        let l = match mu.geometry() {
            Geometry::Tree { .. } => w.stable_length() as f64,
            Geometry::Plane(m) => match translation_length(&m.isometry_of(w)) {
                Ok(l) => l,
                Err(_) => continue,
            },
        };
        eqs.push(Equation { word: w.to_string(), winding: pi.abelianize(w).0, stable_length: l });
    }
    let (phi, residual) = least_squares(&eqs.iter().collect::<Vec<_>>(), d)?;
    let verdict = if span_rank == d && residual > threshold { Verdict::Nondegenerate } else { Verdict::Inconclusive };
    let witness = if residual > threshold { minimal_inconsistent(&eqs, d, threshold)? } else { Vec::new() };
    Ok(Certificate { verdict, span_rank, dim: d, equations: eqs.len(), residual, threshold, phi, witness })
}

/// Solution and largest absolute residual.
fn least_squares(eqs: &[&Equation], d: usize) -> Result<(Vec<f64>, f64)> {
    if eqs.is_empty() {
        return Ok((vec![0.0; d], 0.0));
    }
    let a = DMatrix::from_fn(eqs.len(), d, |i, j| eqs[i].winding[j] as f64);
    let b = DVector::from_iterator(eqs.len(), eqs.iter().map(|e| e.stable_length));
    let svd = a.clone().svd(true, true);
    let phi = svd.solve(&b, 1e-10).map_err(|e| Error::Numerical(e.to_string()))?;
    let residual = (&a * &phi - &b).amax();
    Ok((phi.iter().copied().collect(), residual))
}

fn minimal_inconsistent(eqs: &[Equation], d: usize, tol: f64) -> Result<Vec<Equation>> {
    // shortest prefix of the (shortlex ordered) list that is inconsistent
    let mut chosen: Vec<&Equation> = Vec::new();
    for e in eqs {
        chosen.push(e);
        if least_squares(&chosen, d)?.1 > tol {
            break;
        }
    }
    // drop equations that are not needed for the inconsistency
    let mut i = 0;
    while i < chosen.len() {
        let mut trial = chosen.clone();
        trial.remove(i);
        if least_squares(&trial, d)?.1 > tol {
            chosen = trial;
        } else {
            i += 1;
        }
    }
    Ok(chosen.into_iter().cloned().collect())
}
