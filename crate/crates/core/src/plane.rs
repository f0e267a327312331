//! Schottky groups acting on the Poincaré disk.
//!
//! Isometries are kept in `SU(1,1)` form `z ↦ (αz + β)/(β̄z + ᾱ)`, which is
//! the natural chart for the disk; the real `SL(2,R)` matrix used in
//! configuration files is recovered through the Cayley transform.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group::{AbelianVector, Letter, Projection, Word};

/// Interior points must satisfy `|z| < 1 - INTERIOR_MARGIN`.
pub const INTERIOR_MARGIN: f64 = 1e-12;
/// Largest ray time whose point is still representable as an interior
/// point in double precision.
pub const MAX_RAY_TIME: f64 = 27.0;

/// An orientation-preserving isometry of the disk, tagged with the group
/// element it represents.
#[derive(Clone, Debug, PartialEq)]
pub struct Isometry {
    alpha: Complex64,
    beta: Complex64,
    pub label: Word,
}

impl Isometry {
    pub fn identity() -> Isometry {
        Isometry { alpha: Complex64::new(1.0, 0.0), beta: Complex64::new(0.0, 0.0), label: Word::identity() }
    }

    /// From `SU(1,1)` coefficients; rescaled so `|α|² - |β|² = 1`.
    pub fn from_su11(alpha: Complex64, beta: Complex64, label: Word) -> Result<Isometry> {
        let det = alpha.norm_sqr() - beta.norm_sqr();
        if !(det > 0.0) || !det.is_finite() {
            return Err(Error::Numerical(format!("not an SU(1,1) matrix: |α|²-|β|² = {det}")));
        }
        let s = det.sqrt();
        Ok(Isometry { alpha: alpha / s, beta: beta / s, label })
    }

    /// From a real matrix `[a, b, c, d]` (row-major) acting on the upper
    /// half-plane. The determinant must be positive; it is normalized to 1.
    pub fn from_sl2r(m: [f64; 4], label: Word) -> Result<Isometry> {
        let [a, b, c, d] = m;
        let det = a * d - b * c;
        if !(det > 0.0) {
            return Err(Error::InvalidInput(format!("matrix {m:?} has non-positive determinant {det}")));
        }
        // Conjugate by the Cayley map z ↦ (z - i)/(z + i).
        let alpha = Complex64::new(a + d, b - c) / 2.0;
        let beta = Complex64::new(a - d, -(b + c)) / 2.0;
        Isometry::from_su11(alpha, beta, label)
    }

    /// The real matrix in the upper half-plane chart, determinant 1.
    pub fn matrix(&self) -> [f64; 4] {
        let (al, be) = (self.alpha, self.beta);
        [al.re + be.re, al.im - be.im, -al.im - be.im, al.re - be.re]
    }

    pub fn alpha(&self) -> Complex64 {
        self.alpha
    }

    pub fn beta(&self) -> Complex64 {
        self.beta
    }

    /// `|det - 1|` of the real matrix.
    pub fn det_error(&self) -> f64 {
        let [a, b, c, d] = self.matrix();
        (a * d - b * c - 1.0).abs()
    }

    pub fn trace(&self) -> f64 {
        2.0 * self.alpha.re
    }

    pub fn inverse(&self) -> Isometry {
        Isometry { alpha: self.alpha.conj(), beta: -self.beta, label: self.label.invert() }
    }

    /// `self ∘ rhs`.
    pub fn compose(&self, rhs: &Isometry) -> Isometry {
        let alpha = self.alpha * rhs.alpha + self.beta * rhs.beta.conj();
        let beta = self.alpha * rhs.beta + self.beta * rhs.alpha.conj();
        // |α|² - |β|² cancels catastrophically for long words, so the
        // product is not renormalized.
        Isometry { alpha, beta, label: self.label.multiply(&rhs.label) }
    }

    fn apply_raw(&self, z: Complex64) -> Complex64 {
        (self.alpha * z + self.beta) / (self.beta.conj() * z + self.alpha.conj())
    }

    /// The image of the origin, `β/ᾱ`.
    pub fn orbit_point(&self) -> Complex64 {
        self.beta / self.alpha.conj()
    }

    /// `d(o, g.o) = 2 log(|α| + |β|)`, accurate even when `g.o` is too close
    /// to the circle to be stored as a [`DiskPoint`].
    pub fn displacement(&self) -> f64 {
        2.0 * (self.alpha.norm() + self.beta.norm()).ln()
    }

    /// Attracting and repelling fixed points on the circle, for hyperbolic
    /// elements.
    pub fn fixed_points(&self) -> Result<(CircleBoundaryPoint, CircleBoundaryPoint)> {
        translation_length(self)?;
        // β̄ z² + (ᾱ - α) z - β = 0
        let a = self.beta.conj();
        let b = self.alpha.conj() - self.alpha;
        let c = -self.beta;
        let disc = (b * b - 4.0 * a * c).sqrt();
        let r1 = (-b + disc) / (2.0 * a);
        let r2 = (-b - disc) / (2.0 * a);
        // attracting point: |g'(z)| < 1, i.e. |β̄ z + ᾱ| > 1
        let deriv = |z: Complex64| (self.beta.conj() * z + self.alpha.conj()).norm();
        let (p, m) = if deriv(r1) > deriv(r2) { (r1, r2) } else { (r2, r1) };
        Ok((CircleBoundaryPoint::from_complex(p)?, CircleBoundaryPoint::from_complex(m)?))
    }
}

/// A point of the open disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiskPoint {
    z: Complex64,
}

impl DiskPoint {
    pub const ORIGIN: DiskPoint = DiskPoint { z: Complex64 { re: 0.0, im: 0.0 } };

    pub fn new(z: Complex64) -> Result<DiskPoint> {
        if !(z.norm() < 1.0 - INTERIOR_MARGIN) {
            return Err(Error::Numerical(format!("{z} is not an interior point")));
        }
        Ok(DiskPoint { z })
    }

    pub fn z(&self) -> Complex64 {
        self.z
    }
}

/// A point of the unit circle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircleBoundaryPoint {
    xi: Complex64,
}

impl CircleBoundaryPoint {
    pub fn from_angle(theta: f64) -> CircleBoundaryPoint {
        CircleBoundaryPoint { xi: Complex64::from_polar(1.0, theta) }
    }

    /// Accepts points within `1e-12` of the circle and projects them onto it.
    pub fn from_complex(xi: Complex64) -> Result<CircleBoundaryPoint> {
        if (xi.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("{xi} is not on the unit circle")));
        }
        Ok(CircleBoundaryPoint { xi: xi / xi.norm() })
    }

    /// The direction of a nonzero interior point.
    pub fn direction_of(z: Complex64) -> Result<CircleBoundaryPoint> {
        if z.norm() == 0.0 {
            return Err(Error::Domain("origin has no direction".into()));
        }
        Ok(CircleBoundaryPoint { xi: z / z.norm() })
    }

    pub fn xi(&self) -> Complex64 {
        self.xi
    }

    pub fn angle(&self) -> f64 {
        self.xi.arg()
    }
}

pub fn mobius_apply(g: &Isometry, z: DiskPoint) -> Result<DiskPoint> {
    let w = g.apply_raw(z.z);
    if !w.is_finite() || w.norm() > 1.0 + INTERIOR_MARGIN {
        return Err(Error::Numerical(format!("image {w} left the closed disk")));
    }
    DiskPoint::new(w)
}

pub fn mobius_apply_boundary(g: &Isometry, xi: CircleBoundaryPoint) -> CircleBoundaryPoint {
    let w = g.apply_raw(xi.xi);
    CircleBoundaryPoint { xi: w / w.norm() }
}

/// Hyperbolic distance, computed as `2 artanh |z₁ - z₂| / |1 - z̄₁ z₂|`,
/// which equals the `arcosh` closed form without its cancellation near 0.
pub fn hyp_distance(z1: DiskPoint, z2: DiskPoint) -> f64 {
    let num = (z1.z - z2.z).norm();
    let den = (Complex64::new(1.0, 0.0) - z1.z.conj() * z2.z).norm();
    2.0 * (num / den).min(1.0).atanh()
}

/// The horofunction at `ξ`, normalized to vanish at the origin:
/// `h_ξ(z) = log(|ξ - z|² / (1 - |z|²))`.
pub fn busemann_disk(xi: CircleBoundaryPoint, z: DiskPoint) -> Result<f64> {
    let gap = (xi.xi - z.z).norm();
    if gap < INTERIOR_MARGIN {
        return Err(Error::Singularity);
    }
    Ok((gap * gap).ln() - (1.0 - z.z.norm_sqr()).ln())
}

/// `σ(γ, ξ) = h_ξ(γ⁻¹.o)`, evaluated as `2 log |αξ + β|`, which stays
/// accurate when `γ⁻¹.o` is extremely close to the circle.
pub fn busemann_cocycle_disk(gamma: &Isometry, xi: CircleBoundaryPoint) -> f64 {
    2.0 * (gamma.alpha * xi.xi + gamma.beta).norm().ln()
}

pub fn ray_point_disk(xi: CircleBoundaryPoint, t: f64) -> Result<DiskPoint> {
    if !(t >= 0.0) || t > MAX_RAY_TIME {
        return Err(Error::Numerical(format!("ray time {t} outside [0, {MAX_RAY_TIME}]")));
    }
    DiskPoint::new(xi.xi * (t / 2.0).tanh())
}

/// `2 arcosh(|tr|/2)`; hyperbolic elements only.
pub fn translation_length(g: &Isometry) -> Result<f64> {
    let half = g.trace().abs() / 2.0;
    if half <= 1.0 + 0.5e-9 {
        return Err(Error::Domain(format!("trace {} is not hyperbolic", g.trace())));
    }
    Ok(2.0 * half.acosh())
}

/// A closed round disk orthogonal to the unit circle, i.e. a closed
/// hyperbolic half-plane. The Euclidean centre sits at distance
/// `sqrt(1 + r²)` from the origin in direction `center_angle`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PingPongDisk {
    pub center_angle: f64,
    pub radius: f64,
}

impl PingPongDisk {
    pub fn center(&self) -> Complex64 {
        Complex64::from_polar((1.0 + self.radius * self.radius).sqrt(), self.center_angle)
    }

    pub fn contains(&self, z: Complex64, tol: f64) -> bool {
        (z - self.center()).norm() <= self.radius + tol
    }

    /// Hyperbolic distance from an interior point to the half-plane
    /// (0 inside). Uses `sinh d = (|z - c|² - r²) / (r (1 - |z|²))`.
    pub fn distance_from(&self, z: Complex64) -> f64 {
        let gap = (z - self.center()).norm_sqr() - self.radius * self.radius;
        if gap <= 0.0 {
            return 0.0;
        }
        (gap / (self.radius * (1.0 - z.norm_sqr()))).asinh()
    }
}

/// A free group acting on the disk through a ping-pong configuration.
/// `disks[letter.code()]` is the disk attached to that letter: the letter
/// maps the exterior of its inverse's disk into its own disk.
#[derive(Clone, Debug)]
pub struct SchottkyModel {
    generators: Vec<Isometry>,
    disks: Vec<PingPongDisk>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SchottkyReport {
    pub rank: usize,
    pub samples_checked: usize,
    pub max_det_error: f64,
    pub min_disk_gap: f64,
    pub max_pingpong_excess: f64,
}

impl SchottkyModel {
    /// Unvalidated; call [`validate_schottky`] before use.
    pub fn new(generators: Vec<Isometry>, disks: Vec<PingPongDisk>) -> Result<SchottkyModel> {
        if generators.len() < 2 || disks.len() != 2 * generators.len() {
            return Err(Error::InvalidInput(format!("need k >= 2 generators and 2k disks, got {} and {}", generators.len(), disks.len())));
        }
        let generators =
            generators.into_iter().enumerate().map(|(i, g)| Isometry { label: Word::letter(Letter::new(i, false)), ..g }).collect();
        Ok(SchottkyModel { generators, disks })
    }

    /// `k` hyperbolic generators with trace `trace`, axes through the origin
    /// at angles `jπ/k`. Disjoint disks need `trace > 2 / sin(π/2k)`.
    pub fn symmetric(rank: usize, trace: f64) -> Result<SchottkyModel> {
        let c = trace / 2.0;
        if c <= 1.0 {
            return Err(Error::Domain(format!("trace {trace} is not hyperbolic")));
        }
        let s = (c * c - 1.0).sqrt();
        let mut gens = Vec::with_capacity(rank);
        let mut disks = Vec::with_capacity(2 * rank);
        for j in 0..rank {
            let theta = j as f64 * PI / rank as f64;
            let g = Isometry::from_su11(Complex64::new(c, 0.0), Complex64::from_polar(s, theta), Word::letter(Letter::new(j, false)))?;
            gens.push(g);
            disks.push(PingPongDisk { center_angle: theta, radius: 1.0 / s });
            disks.push(PingPongDisk { center_angle: theta + PI, radius: 1.0 / s });
        }
        let model = SchottkyModel::new(gens, disks)?;
        validate_schottky(&model)?;
        Ok(model)
    }

    pub fn rank(&self) -> usize {
        self.generators.len()
    }

    pub fn generators(&self) -> &[Isometry] {
        &self.generators
    }

    pub fn disks(&self) -> &[PingPongDisk] {
        &self.disks
    }

    pub fn disk(&self, l: Letter) -> &PingPongDisk {
        &self.disks[l.code() as usize]
    }

    pub fn letter_isometry(&self, l: Letter) -> Isometry {
        let g = &self.generators[l.generator()];
        if l.is_inverse() {
            g.inverse()
        } else {
            g.clone()
        }
    }

    pub fn isometry_of(&self, w: &Word) -> Isometry {
        let mut acc = Isometry::identity();
        for &l in w.letters() {
            acc = acc.compose(&self.letter_isometry(l));
        }
        acc.label = w.clone();
        acc
    }

    /// The locally bounded winding map `z ↦ π(nearest orbit label)`.
    pub fn winding(&self, pi: &Projection, z: DiskPoint, search_depth: usize) -> Result<AbelianVector> {
        Ok(pi.abelianize(&nearest_orbit_element(self, z, search_depth)?.label))
    }
}

const PINGPONG_SAMPLES: usize = 256;
const PINGPONG_TOL: f64 = 1e-9;

/// Check orthogonality, disjointness and the ping-pong inclusions on
/// sampled boundary points.
pub fn validate_schottky(model: &SchottkyModel) -> Result<SchottkyReport> {
    let k = model.rank();
    let mut max_det_error: f64 = 0.0;
    for g in &model.generators {
        max_det_error = max_det_error.max(g.det_error());
        translation_length(g).map_err(|e| Error::PingPong { generator: g.label.first().unwrap().generator(), detail: e.to_string() })?;
    }
    let mut min_gap = f64::INFINITY;
    for i in 0..2 * k {
        let a = &model.disks[i];
        if !(a.radius > 0.0) {
            return Err(Error::PingPong { generator: i / 2, detail: format!("disk {i} has radius {}", a.radius) });
        }
        for b in &model.disks[i + 1..] {
            let gap = (a.center() - b.center()).norm() - a.radius - b.radius;
            min_gap = min_gap.min(gap);
        }
    }
    if min_gap <= 0.0 {
        return Err(Error::PingPong { generator: 0, detail: format!("disks overlap (gap {min_gap:.3e})") });
    }

    let mut samples = 0;
    let mut worst: f64 = f64::NEG_INFINITY;
    for (gi, g) in model.generators.iter().enumerate() {
        for inverse in [false, true] {
            let letter = Letter::new(gi, inverse);
            let h = if inverse { g.inverse() } else { g.clone() };
            let target = model.disk(letter);
            let source = model.disk(letter.inverse());
            // Points of the complement of the source disk: the boundary of
            // every other disk and unit-circle points outside the source.
            let mut pts = Vec::new();
            for d in &model.disks {
                let c = d.center();
                for j in 0..PINGPONG_SAMPLES / 4 {
                    let p = c + Complex64::from_polar(d.radius, 2.0 * PI * j as f64 / (PINGPONG_SAMPLES / 4) as f64);
                    if p.norm() <= 1.0 + 1e-12 {
                        pts.push(p);
                    }
                }
            }
            for j in 0..PINGPONG_SAMPLES {
                let p = Complex64::from_polar(1.0, 2.0 * PI * (j as f64 + 0.5) / PINGPONG_SAMPLES as f64);
                if !source.contains(p, -PINGPONG_TOL) {
                    pts.push(p);
                }
            }
            pts.push(Complex64::new(0.0, 0.0));
            for p in pts {
                if source.contains(p, -PINGPONG_TOL) {
                    continue;
                }
                let w = h.apply_raw(p);
                let excess = (w - target.center()).norm() - target.radius;
                worst = worst.max(excess);
                samples += 1;
                if excess > PINGPONG_TOL {
                    return Err(Error::PingPong {
                        generator: gi,
                        detail: format!("{letter:?} maps {p} to {w}, outside its disk by {excess:.3e}"),
                    });
                }
            }
        }
    }
    Ok(SchottkyReport { rank: k, samples_checked: samples, max_det_error, min_disk_gap: min_gap, max_pingpong_excess: worst })
}

/// Distances within this of each other are treated as ties and broken by
/// shortlex order on labels.
const TIE_TOL: f64 = 1e-9;

/// The orbit point closest to `z` among words of length at most
/// `search_depth`, by branch and bound over the ping-pong tree.
pub fn nearest_orbit_element(model: &SchottkyModel, z: DiskPoint, search_depth: usize) -> Result<Isometry> {
    struct Search<'a> {
        model: &'a SchottkyModel,
        inverses: Vec<Isometry>,
        depth: usize,
        best: (f64, Word),
        truncated_bound: f64,
        word: Word,
    }

    impl Search<'_> {
        // q = word⁻¹ · z
        fn visit(&mut self, q: Complex64) {
            let d = 2.0 * q.norm().min(1.0).atanh();
            if d < self.best.0 - TIE_TOL || (d <= self.best.0 + TIE_TOL && self.word.shortlex_cmp(&self.best.1).is_lt()) {
                self.best = (d, self.word.clone());
            }
            let last_inv = self.word.last().map(Letter::inverse);
            let mut children: Vec<(f64, Letter)> =
                Letter::all(self.model.rank()).filter(|&c| Some(c) != last_inv).map(|c| (self.model.disk(c).distance_from(q), c)).collect();
            children.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (bound, c) in children {
                if bound > self.best.0 + TIE_TOL {
                    break;
                }
                if self.word.len() == self.depth {
                    self.truncated_bound = self.truncated_bound.min(bound);
                    continue;
                }
                let q_next = self.inverses[c.code() as usize].apply_raw(q);
                self.word.push(c);
                self.visit(q_next);
                self.word.truncate(self.word.len() - 1);
            }
        }
    }

    let inverses = Letter::all(model.rank()).map(|l| model.letter_isometry(l.inverse())).collect();
    let mut s = Search {
        model,
        inverses,
        depth: search_depth,
        best: (f64::INFINITY, Word::identity()),
        truncated_bound: f64::INFINITY,
        word: Word::with_capacity(search_depth),
    };
    s.visit(z.z);
    let (dist, label) = s.best;
    if (search_depth > 0 && label.len() == search_depth) || s.truncated_bound <= dist + TIE_TOL {
        return Err(Error::InconclusiveDepth { depth: search_depth });
    }
    Ok(model.isometry_of(&label))
}

/// Tracks `w_k` along a walk without overflow: the coefficients are kept
/// projectively with a separate log scale.
#[derive(Clone, Debug)]
pub struct OrbitTracker {
    alpha: Complex64,
    beta: Complex64,
    log_scale: f64,
}

impl Default for OrbitTracker {
    fn default() -> Self {
        OrbitTracker { alpha: Complex64::new(1.0, 0.0), beta: Complex64::new(0.0, 0.0), log_scale: 0.0 }
    }
}

impl OrbitTracker {
    pub fn mul_right(&mut self, g: &Isometry) {
        let alpha = self.alpha * g.alpha + self.beta * g.beta.conj();
        let beta = self.alpha * g.beta + self.beta * g.alpha.conj();
        let n = alpha.norm();
        self.alpha = alpha / n;
        self.beta = beta / n;
        self.log_scale += n.ln();
    }

    /// `d(o, w.o)`.
    pub fn displacement(&self) -> f64 {
        2.0 * (self.log_scale + (self.alpha.norm() + self.beta.norm()).ln())
    }

    /// `σ(w⁻¹, ξ) = h_ξ(w.o)`.
    pub fn cocycle_of_inverse(&self, xi: CircleBoundaryPoint) -> f64 {
        2.0 * (self.log_scale + (self.alpha.conj() * xi.xi() - self.beta).norm().ln())
    }

    /// Direction of `w.o` seen from the origin; converges to the limit
    /// point of the walk.
    pub fn direction(&self) -> Result<CircleBoundaryPoint> {
        CircleBoundaryPoint::direction_of(self.beta / self.alpha.conj())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> SchottkyModel {
        SchottkyModel::symmetric(2, 4.0).unwrap()
    }

    fn pt(re: f64, im: f64) -> DiskPoint {
        DiskPoint::new(Complex64::new(re, im)).unwrap()
    }

    #[test]
    fn sl2r_round_trip() {
        let g = Isometry::from_sl2r([2.0, 1.0, 1.0, 1.0], Word::identity()).unwrap();
        let m = g.matrix();
        for (a, b) in m.iter().zip([2.0, 1.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-12, "{m:?}");
        }
        assert!((g.trace() - 3.0).abs() < 1e-12);
        assert!(g.det_error() < 1e-12);
    }

    #[test]
    fn sl2r_normalizes_and_rejects() {
        let g = Isometry::from_sl2r([4.0, 0.0, 0.0, 1.0], Word::identity()).unwrap();
        assert!(g.det_error() < 1e-12);
        assert!(Isometry::from_sl2r([1.0, 2.0, 3.0, 4.0], Word::identity()).is_err());
    }

    #[test]
    fn identity_and_inverse() {
        let z = pt(0.3, -0.2);
        assert_eq!(mobius_apply(&Isometry::identity(), z).unwrap(), z);
        let g = model().isometry_of(&"uvU".parse().unwrap());
        let back = mobius_apply(&g.inverse(), mobius_apply(&g, z).unwrap()).unwrap();
        assert!((back.z() - z.z()).norm() < 1e-10);
    }

    #[test]
    fn radial_distance() {
        for r in [0.1, 0.5, 0.9, 0.999] {
            let d = hyp_distance(DiskPoint::ORIGIN, pt(r, 0.0));
            assert!((d - ((1.0 + r) / (1.0 - r)).ln()).abs() < 1e-12);
        }
        assert_eq!(hyp_distance(pt(0.2, 0.3), pt(0.2, 0.3)), 0.0);
    }

    #[test]
    fn busemann_on_rays() {
        let xi = CircleBoundaryPoint::from_angle(0.7);
        assert!(busemann_disk(xi, DiskPoint::ORIGIN).unwrap().abs() < 1e-15);
        for t in [0.5, 3.0, 10.0, 15.0] {
            let z = ray_point_disk(xi, t).unwrap();
            assert!((busemann_disk(xi, z).unwrap() + t).abs() < 1e-9);
            let opposite = DiskPoint::new(-z.z()).unwrap();
            assert!((busemann_disk(xi, opposite).unwrap() - t).abs() < 1e-9);
        }
        assert!(matches!(busemann_disk(xi, DiskPoint { z: xi.xi() * (1.0 - 1e-13) }), Err(Error::Singularity)));
    }

    #[test]
    fn ray_points() {
        let xi = CircleBoundaryPoint::from_angle(-2.0);
        assert_eq!(ray_point_disk(xi, 0.0).unwrap(), DiskPoint::ORIGIN);
        for (s, t) in [(0.0, 5.0), (1.5, 12.25), (3.0, 20.0)] {
            let d = hyp_distance(ray_point_disk(xi, s).unwrap(), ray_point_disk(xi, t).unwrap());
            assert!((d - (t - s)).abs() < 1e-9, "{d} vs {}", t - s);
        }
        assert!((hyp_distance(DiskPoint::ORIGIN, ray_point_disk(xi, 7.0).unwrap()) - 7.0).abs() < 1e-10);
        assert!(ray_point_disk(xi, 60.0).is_err());
    }

    #[test]
    fn translation_length_closed_form() {
        let g = Isometry::from_sl2r([2.0, 1.0, 1.0, 1.0], Word::identity()).unwrap();
        assert!((translation_length(&g).unwrap() - 1.924_847_300_238_26).abs() < 1e-12);
        let elliptic = Isometry::from_sl2r([0.0, -1.0, 1.0, 0.0], Word::identity()).unwrap();
        assert!(matches!(translation_length(&elliptic), Err(Error::Domain(_))));
        let parabolic = Isometry::from_sl2r([1.0, 1.0, 0.0, 1.0], Word::identity()).unwrap();
        assert!(translation_length(&parabolic).is_err());
    }

    #[test]
    fn translation_length_by_power_iteration() {
        let m = model();
        for s in ["u", "uv", "uvUUv", "vvV"] {
            let w: Word = s.parse().unwrap();
            let g = m.isometry_of(&w);
            let l = translation_length(&g).unwrap();
            let n = 50;
            let mut tracker = OrbitTracker::default();
            for _ in 0..n {
                tracker.mul_right(&g);
            }
            // distance from the origin to the axis of g
            let (p, q) = g.fixed_points().unwrap();
            let axis = axis_distance(p.xi(), q.xi());
            let est = tracker.displacement() / n as f64;
            assert!((est - l).abs() <= 2.0 * axis / n as f64 + 1e-9, "{s}: {est} vs {l}");
        }
    }

    fn axis_distance(p: Complex64, q: Complex64) -> f64 {
        // The geodesic with endpoints p, q is the orthogonal circle through
        // both; its closest point to o is at Euclidean radius tan-half-angle.
        let half = ((p / q).arg().abs() / 2.0).min(PI - (p / q).arg().abs() / 2.0);
        let r = ((PI / 2.0 - half) / 2.0).tan();
        2.0 * r.atanh()
    }

    #[test]
    fn fixed_points_are_fixed() {
        let g = model().isometry_of(&"uvvU".parse().unwrap());
        let (p, q) = g.fixed_points().unwrap();
        for x in [p, q] {
            assert!((mobius_apply_boundary(&g, x).xi() - x.xi()).norm() < 1e-9);
        }
        // forward orbit of the origin converges to the attracting point
        let g8 = model().isometry_of(&"uvvU".parse::<Word>().unwrap().pow(8));
        assert!((g8.orbit_point() - p.xi()).norm() < 1e-6);
    }

    #[test]
    fn half_plane_distance_matches_sampled_geodesic() {
        let d = PingPongDisk { center_angle: 0.4, radius: 0.6 };
        let c = d.center();
        let z = Complex64::new(-0.3, 0.5);
        let mut best = f64::INFINITY;
        for j in 0..200_000 {
            let p = c + Complex64::from_polar(d.radius, 2.0 * PI * j as f64 / 200_000.0);
            if p.norm() < 1.0 - 1e-9 {
                best = best.min(hyp_distance(DiskPoint { z }, DiskPoint { z: p }));
            }
        }
        assert!((d.distance_from(z) - best).abs() < 1e-6, "{} vs {best}", d.distance_from(z));
        assert_eq!(d.distance_from(c / c.norm() * 0.99), 0.0);
    }

    #[test]
    fn symmetric_model_validates() {
        let r = validate_schottky(&model()).unwrap();
        assert!(r.max_pingpong_excess <= 1e-9);
        assert!(r.min_disk_gap > 0.0);
        assert!(SchottkyModel::symmetric(2, 2.5).is_err());
    }

    #[test]
    fn broken_pingpong_rejected() {
        let m = model();
        let mut disks = m.disks().to_vec();
        disks[0].radius *= 0.5;
        let bad = SchottkyModel::new(m.generators().to_vec(), disks).unwrap();
        assert!(matches!(validate_schottky(&bad), Err(Error::PingPong { generator: 0, .. })));
    }

    #[test]
    fn nearest_orbit_examples() {
        let m = model();
        assert!(nearest_orbit_element(&m, DiskPoint::ORIGIN, 4).unwrap().label.is_empty());
        for s in ["u", "uV", "vvu", "UvUv"] {
            let w: Word = s.parse().unwrap();
            let z = DiskPoint::new(m.isometry_of(&w).orbit_point()).unwrap();
            assert_eq!(nearest_orbit_element(&m, z, w.len() + 2).unwrap().label, w);
        }
        let z = DiskPoint::new(m.isometry_of(&"uvu".parse().unwrap()).orbit_point()).unwrap();
        assert!(matches!(nearest_orbit_element(&m, z, 3), Err(Error::InconclusiveDepth { .. })));
    }

    /// Exhaustive search over all reduced words of bounded length.
    fn brute_nearest(m: &SchottkyModel, z: DiskPoint, depth: usize) -> Word {
        let mut frontier = vec![Word::identity()];
        let mut all = vec![Word::identity()];
        for _ in 0..depth {
            let mut next = Vec::new();
            for w in &frontier {
                for l in Letter::all(m.rank()) {
                    let mut x = w.clone();
                    if !x.push(l) {
                        next.push(x);
                    }
                }
            }
            all.extend(next.iter().cloned());
            frontier = next;
        }
        let dist = |w: &Word| hyp_distance(z, DiskPoint { z: m.isometry_of(w).orbit_point() });
        all.into_iter().min_by(|a, b| dist(a).partial_cmp(&dist(b)).unwrap().then(a.shortlex_cmp(b))).unwrap()
    }

    #[test]
    fn branch_and_bound_matches_exhaustive() {
        let m = model();
        let mut state = 0x1234_5678_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..100 {
            let r = 0.995 * next().sqrt();
            let z = DiskPoint::new(Complex64::from_polar(r, 2.0 * PI * next())).unwrap();
            let fast = nearest_orbit_element(&m, z, 8).unwrap().label;
            assert_eq!(fast, brute_nearest(&m, z, 6), "at {z:?}");
        }
    }

    #[test]
    fn orbit_tracker_matches_isometry() {
        let m = model();
        let w: Word = "uvvUVVuuv".parse().unwrap();
        let mut t = OrbitTracker::default();
        for &l in w.letters() {
            t.mul_right(&m.letter_isometry(l));
        }
        let g = m.isometry_of(&w);
        assert!((t.displacement() - g.displacement()).abs() < 1e-9);
        assert!((t.direction().unwrap().xi() - g.orbit_point() / g.orbit_point().norm()).norm() < 1e-12);
        let d = hyp_distance(DiskPoint::ORIGIN, DiskPoint::new(g.orbit_point()).unwrap());
        assert!((d - g.displacement()).abs() < 1e-8);
        let xi = CircleBoundaryPoint::from_angle(2.1);
        assert!((t.cocycle_of_inverse(xi) - busemann_cocycle_disk(&g.inverse(), xi)).abs() < 1e-9);
    }
}
