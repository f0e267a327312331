//! Boundary of the Cayley tree of `F_k`: boundary words, Gromov products,
//! horofunctions, the Busemann cocycle, geodesic rays and tracking
//! distances. Everything here is integer-exact.
//!
//! On a tree the Gromov and Busemann boundaries coincide, so a single
//! [`BoundaryWord`] type serves both.

use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::group::{common_prefix, Letter, Word};

/// Gromov products between two boundary words are only computed up to this
/// many letters.
pub const BOUNDARY_PRODUCT_CAP: usize = 1 << 20;

/// Something that can keep producing letters of an infinite reduced word.
///
/// Implementations append to `out`, which always holds the letters produced
/// so far; they must never rewrite existing letters.
pub trait LetterSource: Send + fmt::Debug {
    fn extend(&mut self, out: &mut Vec<Letter>, wanted: usize) -> Result<()>;
}

/// A finite list of letters with no continuation. Useful in tests and for
/// boundary points read back from disk.
#[derive(Debug)]
pub struct Exhausted;

impl LetterSource for Exhausted {
    fn extend(&mut self, out: &mut Vec<Letter>, wanted: usize) -> Result<()> {
        Err(Error::OracleExhausted { requested: wanted, available: out.len() })
    }
}

/// A point of the boundary of the Cayley tree: an infinite reduced word,
/// realized lazily.
#[derive(Clone)]
pub struct BoundaryWord {
    inner: Arc<Kind>,
}

enum Kind {
    Periodic { prefix: Word, period: Word },
    Shifted { head: Word, base: BoundaryWord, skip: usize },
    Oracle(Mutex<OracleState>),
}

struct OracleState {
    letters: Vec<Letter>,
    source: Box<dyn LetterSource>,
}

impl BoundaryWord {
    /// `prefix · period^∞`. The concatenation must already be reduced and
    /// `period` cyclically reduced.
    pub fn eventually_periodic(prefix: Word, period: Word) -> Result<BoundaryWord> {
        if period.is_empty() {
            return Err(Error::InvalidInput("empty period".into()));
        }
        if !period.is_cyclically_reduced() {
            return Err(Error::InvalidInput(format!("period {period} is not cyclically reduced")));
        }
        if let (Some(a), Some(b)) = (prefix.last(), period.first()) {
            if a == b.inverse() {
                return Err(Error::InvalidInput(format!("{prefix}·({period})^∞ is not reduced")));
            }
        }
        Ok(BoundaryWord { inner: Arc::new(Kind::Periodic { prefix, period }) })
    }

    pub fn periodic(period: Word) -> Result<BoundaryWord> {
        BoundaryWord::eventually_periodic(Word::identity(), period)
    }

    /// A boundary word backed by a lazy source, with `known` letters already
    /// confirmed.
    pub fn from_source(known: Vec<Letter>, source: Box<dyn LetterSource>) -> BoundaryWord {
        debug_assert!(Word::reduce(known.iter().copied()).len() == known.len());
        BoundaryWord { inner: Arc::new(Kind::Oracle(Mutex::new(OracleState { letters: known, source }))) }
    }

    /// A finite confirmed prefix with no way to extend it.
    pub fn finite(prefix: Word) -> BoundaryWord {
        BoundaryWord::from_source(prefix.letters().to_vec(), Box::new(Exhausted))
    }

    /// Number of letters available without further computation
    /// (`usize::MAX` for closed-form words).
    pub fn known_len(&self) -> usize {
        match &*self.inner {
            Kind::Periodic { .. } => usize::MAX,
            Kind::Shifted { head, base, skip } => base.known_len().saturating_sub(*skip).saturating_add(head.len()),
            Kind::Oracle(m) => m.lock().unwrap().letters.len(),
        }
    }

    pub fn letter(&self, i: usize) -> Result<Letter> {
        match &*self.inner {
            Kind::Periodic { prefix, period } => {
                Ok(if i < prefix.len() { prefix.letters()[i] } else { period.letters()[(i - prefix.len()) % period.len()] })
            }
            Kind::Shifted { head, base, skip } => {
                if i < head.len() {
                    Ok(head.letters()[i])
                } else {
                    base.letter(skip + i - head.len())
                }
            }
            Kind::Oracle(m) => {
                let mut st = m.lock().unwrap();
                st.ensure(i + 1)?;
                Ok(st.letters[i])
            }
        }
    }

    /// The first `n` letters.
    pub fn prefix(&self, n: usize) -> Result<Word> {
        let mut out = Vec::with_capacity(n);
        self.copy_letters(0, n, &mut out)?;
        Ok(Word::reduce(out))
    }

    /// Append letters `start..end` to `out`.
    pub fn copy_letters(&self, start: usize, end: usize, out: &mut Vec<Letter>) -> Result<()> {
        match &*self.inner {
            Kind::Oracle(m) => {
                let mut st = m.lock().unwrap();
                st.ensure(end)?;
                out.extend_from_slice(&st.letters[start..end]);
                Ok(())
            }
            Kind::Shifted { head, base, skip } => {
                let h = head.len();
                if start < h {
                    out.extend_from_slice(&head.letters()[start..end.min(h)]);
                }
                if end > h {
                    base.copy_letters(skip + start.max(h) - h, skip + end - h, out)?;
                }
                Ok(())
            }
            Kind::Periodic { .. } => {
                for i in start..end {
                    out.push(self.letter(i)?);
                }
                Ok(())
            }
        }
    }

    /// Length of the common prefix with a finite letter sequence. Reads at
    /// most `letters.len()` letters, and fewer when they differ early.
    pub fn common_prefix_with(&self, letters: &[Letter]) -> Result<usize> {
        const CHUNK: usize = 256;
        let mut buf = Vec::with_capacity(CHUNK);
        let mut i = 0;
        while i < letters.len() {
            let end = (i + CHUNK).min(letters.len());
            buf.clear();
            let exhausted = match self.copy_letters(i, end, &mut buf) {
                Ok(()) => None,
                Err(e @ Error::OracleExhausted { available, .. }) if available > i => {
                    self.copy_letters(i, available, &mut buf)?;
                    Some(e)
                }
                Err(e) => return Err(e),
            };
            let c = common_prefix(&buf, &letters[i..i + buf.len()]);
            if c < buf.len() {
                return Ok(i + c);
            }
            if let Some(e) = exhausted {
                return Err(e);
            }
            i = end;
        }
        Ok(letters.len())
    }

    /// `γ·ξ`. Reads the first `|γ|` letters of `self`.
    pub fn translate(&self, gamma: &Word) -> Result<BoundaryWord> {
        let g = gamma.letters();
        let mut head = Vec::with_capacity(g.len());
        self.copy_letters(0, g.len(), &mut head)?;
        let cancel = g.iter().rev().zip(&head).take_while(|(a, b)| **a == b.inverse()).count();
        Ok(BoundaryWord {
            inner: Arc::new(Kind::Shifted { head: Word::reduce(g[..g.len() - cancel].iter().copied()), base: self.clone(), skip: cancel }),
        })
    }
}

impl OracleState {
    fn ensure(&mut self, n: usize) -> Result<()> {
        if self.letters.len() < n {
            self.source.extend(&mut self.letters, n)?;
            if self.letters.len() < n {
                return Err(Error::OracleExhausted { requested: n, available: self.letters.len() });
            }
        }
        Ok(())
    }
}

impl fmt::Debug for BoundaryWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.inner {
            Kind::Periodic { prefix, period } => write!(f, "{prefix}·({period})^∞"),
            Kind::Shifted { head, base, skip } => write!(f, "{head}·shift({base:?}, {skip})"),
            Kind::Oracle(m) => {
                let st = m.lock().unwrap();
                let shown = Word::reduce(st.letters.iter().take(16).copied());
                write!(f, "{shown}…[{} known, {:?}]", st.letters.len(), st.source)
            }
        }
    }
}

/// Either end of a Gromov product.
#[derive(Clone, Copy, Debug)]
pub enum TreePoint<'a> {
    Vertex(&'a Word),
    Boundary(&'a BoundaryWord),
}

impl<'a> From<&'a Word> for TreePoint<'a> {
    fn from(w: &'a Word) -> Self {
        TreePoint::Vertex(w)
    }
}

impl<'a> From<&'a BoundaryWord> for TreePoint<'a> {
    fn from(b: &'a BoundaryWord) -> Self {
        TreePoint::Boundary(b)
    }
}

/// Gromov product based at the identity: the length of the longest common
/// prefix. Two boundary points are compared up to [`BOUNDARY_PRODUCT_CAP`]
/// letters; reaching the cap is an error.
pub fn gromov_product<'a, 'b>(a: impl Into<TreePoint<'a>>, b: impl Into<TreePoint<'b>>) -> Result<usize> {
    match (a.into(), b.into()) {
        (TreePoint::Vertex(a), TreePoint::Vertex(b)) => Ok(a.common_prefix_len(b)),
        (TreePoint::Vertex(w), TreePoint::Boundary(x)) | (TreePoint::Boundary(x), TreePoint::Vertex(w)) => {
            x.common_prefix_with(w.letters())
        }
        (TreePoint::Boundary(x), TreePoint::Boundary(y)) => {
            let p = gromov_product_capped(x, y, BOUNDARY_PRODUCT_CAP)?;
            if p >= BOUNDARY_PRODUCT_CAP {
                return Err(Error::Domain(format!("boundary points agree on {BOUNDARY_PRODUCT_CAP} letters")));
            }
            Ok(p)
        }
    }
}

/// `min((x|y), cap)` for two boundary points.
pub fn gromov_product_capped(x: &BoundaryWord, y: &BoundaryWord, cap: usize) -> Result<usize> {
    let mut i = 0;
    let mut chunk = 64;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    while i < cap {
        let end = (i + chunk).min(cap);
        a.clear();
        b.clear();
        x.copy_letters(i, end, &mut a)?;
        y.copy_letters(i, end, &mut b)?;
        let c = common_prefix(&a, &b);
        if c < end - i {
            return Ok(i + c);
        }
        i = end;
        chunk *= 2;
    }
    Ok(cap)
}

/// `h_ξ(y) = |y| - 2 (y|ξ)`.
pub fn horofunction(xi: &BoundaryWord, y: &Word) -> Result<i64> {
    let c = xi.common_prefix_with(y.letters())?;
    Ok(y.len() as i64 - 2 * c as i64)
}

/// `σ(γ, ξ) = h_ξ(γ⁻¹)`.
pub fn busemann_cocycle(gamma: &Word, xi: &BoundaryWord) -> Result<i64> {
    horofunction(xi, &gamma.invert())
}

/// A point on the geodesic ray from the identity to a boundary point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RayPoint {
    pub point: Word,
    pub time: usize,
}

pub fn ray_point(xi: &BoundaryWord, t: usize) -> Result<RayPoint> {
    Ok(RayPoint { point: xi.prefix(t)?, time: t })
}

/// Distance from `w` to the point of the ray towards `ξ` at time `|w|`.
pub fn tracking_distance(w: &Word, xi: &BoundaryWord) -> Result<usize> {
    let r = ray_point(xi, w.len())?;
    Ok(w.invert().multiply(&r.point).len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::Projection;

    fn w(s: &str) -> Word {
        s.parse().unwrap()
    }

    fn per(s: &str) -> BoundaryWord {
        BoundaryWord::periodic(w(s)).unwrap()
    }

    #[test]
    fn gromov_product_examples() {
        assert_eq!(gromov_product(&w("uvu"), &w("uvU")).unwrap(), 2);
        let x = w("uVwvv");
        assert_eq!(gromov_product(&x, &x).unwrap(), 5);
        assert_eq!(gromov_product(&w("uvU"), &per("uv")).unwrap(), 2);
        assert_eq!(gromov_product(&per("uv"), &per("uV")).unwrap(), 1);
        assert!(gromov_product(&per("uv"), &per("uvuv")).is_err());
    }

    #[test]
    fn horofunction_examples() {
        let xi = per("uv");
        assert_eq!(horofunction(&xi, &w("uV")).unwrap(), 0);
        for t in 0..10 {
            assert_eq!(horofunction(&xi, &xi.prefix(t).unwrap()).unwrap(), -(t as i64));
        }
        assert_eq!(horofunction(&xi, &w("vvU")).unwrap(), 3);
        assert_eq!(horofunction(&xi, &Word::identity()).unwrap(), 0);
    }

    #[test]
    fn busemann_examples() {
        assert_eq!(busemann_cocycle(&w("u"), &per("uv")).unwrap(), 1);
        assert_eq!(busemann_cocycle(&w("u"), &per("Uv")).unwrap(), -1);
    }

    #[test]
    fn ray_point_examples() {
        let xi = per("uvW");
        assert!(ray_point(&xi, 0).unwrap().point.is_empty());
        let pi = Projection::canonical(3);
        let mut acc = crate::group::AbelianVector::zeros(3);
        for t in 0..30 {
            let r = ray_point(&xi, t).unwrap();
            assert_eq!(r.point.len(), t);
            assert_eq!(pi.abelianize(&r.point), acc);
            pi.add_letter(&mut acc, xi.letter(t).unwrap());
            for s in 0..t {
                let q = ray_point(&xi, s).unwrap().point;
                assert_eq!(q.invert().multiply(&r.point).len(), t - s);
            }
        }
    }

    #[test]
    fn tracking_distance_examples() {
        let xi = per("uvu");
        assert_eq!(tracking_distance(&w("uvu"), &xi).unwrap(), 0);
        assert_eq!(tracking_distance(&w("uV"), &xi).unwrap(), 2);
        assert_eq!(tracking_distance(&w("V"), &xi).unwrap(), 2);
    }

    #[test]
    fn translate_cancels_and_shifts() {
        let xi = per("uv");
        let t = xi.translate(&w("VU")).unwrap();
        assert_eq!(t.prefix(4).unwrap(), w("uvuv"));
        let t = xi.translate(&w("vv")).unwrap();
        assert_eq!(t.prefix(4).unwrap(), w("vvuv"));
        let t = xi.translate(&w("vU")).unwrap();
        assert_eq!(t.prefix(4).unwrap(), w("vvuv"));
    }

    #[test]
    fn exhausted_oracle_is_an_error() {
        let xi = BoundaryWord::finite(w("uv"));
        assert!(matches!(horofunction(&xi, &w("uvu")), Err(Error::OracleExhausted { .. })));
        // a mismatch inside the known part does not need more letters
        assert_eq!(horofunction(&xi, &w("vvv")).unwrap(), 3);
    }

    #[test]
    fn eventually_periodic_validation() {
        assert!(BoundaryWord::periodic(w("uvU")).is_err());
        assert!(BoundaryWord::eventually_periodic(w("U"), w("uv")).is_err());
        assert!(BoundaryWord::eventually_periodic(w("v"), w("uv")).is_ok());
    }
}
