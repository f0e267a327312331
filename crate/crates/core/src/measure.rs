//! Finitely supported step measures and their validation.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::group::{AbelianVector, Projection, Word};
use crate::plane::{translation_length, SchottkyModel};
use crate::rng::unit_f64;

/// Where the group acts.
#[derive(Clone, Debug)]
pub enum Geometry {
    /// The Cayley tree of the free group of the given rank.
    Tree { rank: usize },
    /// A validated Schottky group on the disk.
    Plane(Arc<SchottkyModel>),
}

impl Geometry {
    pub fn rank(&self) -> usize {
        match self {
            Geometry::Tree { rank } => *rank,
            Geometry::Plane(m) => m.rank(),
        }
    }

    pub fn is_tree(&self) -> bool {
        matches!(self, Geometry::Tree { .. })
    }
}

#[derive(Clone, Debug)]
pub struct Atom {
    pub word: Word,
    pub prob: f64,
}

/// A probability measure on the group with finite support.
#[derive(Clone, Debug)]
pub struct StepMeasure {
    atoms: Vec<Atom>,
    cumulative: Vec<f64>,
    geometry: Geometry,
}

/// Probabilities must sum to 1 within this.
pub const PROB_SUM_TOL: f64 = 1e-12;

impl StepMeasure {
    /// Checks the probability axioms; non-elementarity is checked
    /// separately by [`validate_measure`].
    pub fn new(atoms: Vec<(Word, f64)>, geometry: Geometry) -> Result<StepMeasure> {
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("empty support".into()));
        }
        let rank = geometry.rank();
        if rank < 2 {
            return Err(Error::InvalidMeasure(format!("rank {rank} < 2")));
        }
        let mut total = 0.0;
        let mut cumulative = Vec::with_capacity(atoms.len());
        for (w, p) in &atoms {
            if !(*p > 0.0) || !p.is_finite() {
                return Err(Error::InvalidMeasure(format!("atom {w} has probability {p}")));
            }
            if w.rank_hint() > rank {
                return Err(Error::InvalidMeasure(format!("atom {w} uses a generator beyond rank {rank}")));
            }
            total += p;
            cumulative.push(total);
        }
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidMeasure(format!("probabilities sum to {total}")));
        }
        let atoms = atoms.into_iter().map(|(word, prob)| Atom { word, prob }).collect();
        Ok(StepMeasure { atoms, cumulative, geometry })
    }

    /// Uniform on the generators and their inverses.
    pub fn simple_random_walk(geometry: Geometry) -> Result<StepMeasure> {
        let k = geometry.rank();
        let p = 1.0 / (2 * k) as f64;
        let atoms = crate::group::Letter::all(k).map(|l| (Word::letter(l), p)).collect();
        StepMeasure::new(atoms, geometry)
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn rank(&self) -> usize {
        self.geometry.rank()
    }

    /// Longest word in the support; bounds `|t_{k+1} - t_k|` on the tree.
    pub fn max_step_length(&self) -> usize {
        self.atoms.iter().map(|a| a.word.len()).max().unwrap_or(0)
    }

    /// Map one uniform draw to an atom index.
    #[inline]
    pub fn sample_index(&self, draw: u64) -> usize {
        let u = unit_f64(draw) * self.cumulative[self.cumulative.len() - 1];
        self.cumulative.iter().position(|&c| u < c).unwrap_or(self.atoms.len() - 1)
    }

    /// `π` of every atom, in atom order.
    pub fn atom_windings(&self, pi: &Projection) -> Vec<AbelianVector> {
        self.atoms.iter().map(|a| pi.abelianize(&a.word)).collect()
    }

    /// The reflected measure `μ̌(g) = μ(g⁻¹)`.
    pub fn reflected(&self) -> StepMeasure {
        StepMeasure {
            atoms: self.atoms.iter().map(|a| Atom { word: a.word.invert(), prob: a.prob }).collect(),
            cumulative: self.cumulative.clone(),
            geometry: self.geometry.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureReport {
    pub probability_sum: f64,
    pub support_size: usize,
    pub max_step_length: usize,
    /// Two semigroup products with disjoint fixed-point sets, if found.
    pub certificate: Option<(String, String)>,
    pub products_searched: usize,
    /// Always true for finite support.
    pub finite_exponential_moment: bool,
    pub warning: Option<String>,
}

impl MeasureReport {
    pub fn is_non_elementary(&self) -> bool {
        self.certificate.is_some()
    }
}

const CERTIFICATE_DEPTH: usize = 4;
const CERTIFICATE_MAX_PRODUCTS: usize = 200_000;

/// Probability axioms (hard error) plus a search for two hyperbolic
/// products of support elements with disjoint fixed points (a missing
/// certificate is only a warning: the search is incomplete).
pub fn validate_measure(mu: &StepMeasure) -> Result<MeasureReport> {
    let total: f64 = mu.atoms.iter().map(|a| a.prob).sum();
    if (total - 1.0).abs() > PROB_SUM_TOL || mu.atoms.iter().any(|a| !(a.prob > 0.0)) {
        return Err(Error::InvalidMeasure(format!("probabilities sum to {total}")));
    }

    let products = semigroup_products(mu, CERTIFICATE_DEPTH, CERTIFICATE_MAX_PRODUCTS);
    let hyperbolic: Vec<&Word> = products.iter().filter(|w| is_hyperbolic(mu.geometry(), w)).collect();
    let mut certificate = None;
    'outer: for (i, a) in hyperbolic.iter().enumerate() {
        for b in &hyperbolic[i + 1..] {
            if disjoint_fixed_points(mu.geometry(), a, b) {
                certificate = Some((a.to_string(), b.to_string()));
                break 'outer;
            }
        }
    }
    let warning = certificate
        .is_none()
        .then(|| format!("no non-elementarity certificate among {} products of length <= {CERTIFICATE_DEPTH}", products.len()));
    Ok(MeasureReport {
        probability_sum: total,
        support_size: mu.atoms.len(),
        max_step_length: mu.max_step_length(),
        certificate,
        products_searched: products.len(),
        finite_exponential_moment: true,
        warning,
    })
}

/// Distinct products of 1..=depth support elements, shortest first.
pub fn semigroup_products(mu: &StepMeasure, depth: usize, max: usize) -> Vec<Word> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    let mut layer: Vec<Word> = vec![Word::identity()];
    for _ in 0..depth {
        let mut next = Vec::new();
        for w in &layer {
            for a in &mu.atoms {
                let p = w.multiply(&a.word);
                if seen.insert(p.clone()) {
                    out.push(p.clone());
                }
                next.push(p);
                if next.len() >= max {
                    break;
                }
            }
        }
        next.sort();
        next.dedup();
        layer = next;
        if out.len() >= max {
            break;
        }
    }
    out
}

fn is_hyperbolic(geometry: &Geometry, w: &Word) -> bool {
    match geometry {
        Geometry::Tree { .. } => w.stable_length() > 0,
        Geometry::Plane(m) => translation_length(&m.isometry_of(w)).is_ok(),
    }
}

fn disjoint_fixed_points(geometry: &Geometry, a: &Word, b: &Word) -> bool {
    match geometry {
        // Hyperbolic elements of a free group share an endpoint iff they
        // commute, in which case they share both.
        Geometry::Tree { .. } => !a.commutes_with(b),
        Geometry::Plane(m) => {
            let (Ok((a1, a2)), Ok((b1, b2))) = (m.isometry_of(a).fixed_points(), m.isometry_of(b).fixed_points()) else {
                return false;
            };
            [a1, a2].iter().all(|p| [b1, b2].iter().all(|q| (p.xi() - q.xi()).norm() > 1e-9))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Word {
        s.parse().unwrap()
    }

    fn tree() -> Geometry {
        Geometry::Tree { rank: 2 }
    }

    #[test]
    fn example_measure_is_non_elementary() {
        let third = 1.0 / 3.0;
        let mu = StepMeasure::new(vec![(w("u"), third), (w("uv"), third), (w("uV"), third)], tree()).unwrap();
        let r = validate_measure(&mu).unwrap();
        assert!(r.is_non_elementary(), "{r:?}");
        assert_eq!(r.max_step_length, 2);
    }

    #[test]
    fn point_mass_is_elementary() {
        let mu = StepMeasure::new(vec![(w("u"), 1.0)], tree()).unwrap();
        let r = validate_measure(&mu).unwrap();
        assert!(!r.is_non_elementary());
        assert!(r.warning.is_some());
        let mu = StepMeasure::new(vec![(w("u"), 0.5), (w("U"), 0.5)], tree()).unwrap();
        assert!(!validate_measure(&mu).unwrap().is_non_elementary());
    }

    #[test]
    fn simple_random_walk_is_non_elementary() {
        let mu = StepMeasure::simple_random_walk(tree()).unwrap();
        assert!(validate_measure(&mu).unwrap().is_non_elementary());
        let plane = Geometry::Plane(Arc::new(SchottkyModel::symmetric(2, 4.0).unwrap()));
        let mu = StepMeasure::simple_random_walk(plane).unwrap();
        assert!(validate_measure(&mu).unwrap().is_non_elementary());
    }

    #[test]
    fn probability_violations() {
        assert!(StepMeasure::new(vec![(w("u"), 0.5), (w("v"), 0.4)], tree()).is_err());
        assert!(StepMeasure::new(vec![(w("u"), 1.5), (w("v"), -0.5)], tree()).is_err());
        assert!(StepMeasure::new(vec![(w("x"), 1.0)], tree()).is_err());
        assert!(StepMeasure::new(vec![], tree()).is_err());
    }

    #[test]
    fn sampling_respects_weights() {
        let mu = StepMeasure::new(vec![(w("u"), 0.25), (w("v"), 0.75)], tree()).unwrap();
        let mut s = crate::rng::StepStream::new(3);
        let n = 100_000;
        let hits = (0..n).filter(|_| mu.sample_index(s.next_u64()) == 0).count();
        assert!((hits as f64 / n as f64 - 0.25).abs() < 0.01);
    }
}
