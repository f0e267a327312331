//! Exact free-group arithmetic: reduced words, the word metric, the
//! abelianization morphism and stable length.

use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Generator names used for parsing and display. Lowercase is the
/// generator, uppercase its inverse. `e` is skipped so it never collides
/// with the identity.
const ALPHABET: &[u8] = b"uvwxyzabcdfghijklmnopqrst";

/// Largest supported rank.
pub const MAX_RANK: usize = ALPHABET.len();

/// A generator or inverse generator, packed as `(index << 1) | inverse`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Letter(u8);

impl Letter {
    /// `generator` is 0-based.
    pub fn new(generator: usize, inverse: bool) -> Letter {
        assert!(generator < MAX_RANK, "generator index {generator} out of range");
        Letter(((generator as u8) << 1) | inverse as u8)
    }

    pub fn from_code(code: u8) -> Letter {
        assert!(((code >> 1) as usize) < MAX_RANK);
        Letter(code)
    }

    #[inline]
    pub fn code(self) -> u8 {
        self.0
    }

    #[inline]
    pub fn generator(self) -> usize {
        (self.0 >> 1) as usize
    }

    #[inline]
    pub fn is_inverse(self) -> bool {
        self.0 & 1 == 1
    }

    /// +1 for a generator, -1 for an inverse.
    #[inline]
    pub fn sign(self) -> i64 {
        1 - 2 * (self.0 & 1) as i64
    }

    #[inline]
    pub fn inverse(self) -> Letter {
        Letter(self.0 ^ 1)
    }

    /// All `2k` letters of the rank-`k` alphabet, in code order.
    pub fn all(rank: usize) -> impl Iterator<Item = Letter> {
        (0..2 * rank as u8).map(Letter)
    }

    fn to_char(self) -> char {
        let c = ALPHABET[self.generator()] as char;
        if self.is_inverse() {
            c.to_ascii_uppercase()
        } else {
            c
        }
    }

    fn from_char(c: char) -> Option<Letter> {
        let lower = c.to_ascii_lowercase() as u8;
        let g = ALPHABET.iter().position(|&a| a == lower)?;
        Some(Letter::new(g, c.is_ascii_uppercase()))
    }
}

impl fmt::Debug for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_char())
    }
}

/// A reduced word. The identity is the empty word.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Word {
    letters: Vec<Letter>,
}

impl Word {
    pub fn identity() -> Word {
        Word::default()
    }

    pub fn with_capacity(cap: usize) -> Word {
        Word { letters: Vec::with_capacity(cap) }
    }

    pub fn letter(letter: Letter) -> Word {
        Word { letters: vec![letter] }
    }

    /// Freely reduce an arbitrary letter sequence.
    pub fn reduce<I: IntoIterator<Item = Letter>>(letters: I) -> Word {
        let mut w = Word::identity();
        for l in letters {
            w.push(l);
        }
        w
    }

    /// Right-multiply by a single letter, cancelling if possible.
    /// Returns `true` when the letter cancelled.
    #[inline]
    pub fn push(&mut self, letter: Letter) -> bool {
        match self.letters.last() {
            Some(&last) if last == letter.inverse() => {
                self.letters.pop();
                true
            }
            _ => {
                self.letters.push(letter);
                false
            }
        }
    }

    /// Right-multiply in place by a reduced word.
    pub fn mul_assign_word(&mut self, rhs: &Word) {
        for &l in &rhs.letters {
            self.push(l);
        }
    }

    pub fn multiply(&self, rhs: &Word) -> Word {
        let cancel = self.letters.iter().rev().zip(rhs.letters.iter()).take_while(|(a, b)| **a == b.inverse()).count();
        let mut letters = Vec::with_capacity(self.len() + rhs.len() - 2 * cancel);
        letters.extend_from_slice(&self.letters[..self.len() - cancel]);
        letters.extend_from_slice(&rhs.letters[cancel..]);
        Word { letters }
    }

    pub fn invert(&self) -> Word {
        Word { letters: self.letters.iter().rev().map(|l| l.inverse()).collect() }
    }

    pub fn pow(&self, n: u32) -> Word {
        let mut w = Word::identity();
        for _ in 0..n {
            w.mul_assign_word(self);
        }
        w
    }

    /// Word length, i.e. `d(e, w)` in the Cayley tree.
    #[inline]
    pub fn len(&self) -> usize {
        self.letters.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.letters.is_empty()
    }

    #[inline]
    pub fn letters(&self) -> &[Letter] {
        &self.letters
    }

    pub fn first(&self) -> Option<Letter> {
        self.letters.first().copied()
    }

    pub fn last(&self) -> Option<Letter> {
        self.letters.last().copied()
    }

    pub fn prefix(&self, n: usize) -> Word {
        Word { letters: self.letters[..n.min(self.len())].to_vec() }
    }

    pub fn truncate(&mut self, n: usize) {
        self.letters.truncate(n);
    }

    /// Length of the longest common prefix.
    pub fn common_prefix_len(&self, other: &Word) -> usize {
        common_prefix(&self.letters, &other.letters)
    }

    /// Largest generator index + 1 appearing in the word.
    pub fn rank_hint(&self) -> usize {
        self.letters.iter().map(|l| l.generator() + 1).max().unwrap_or(0)
    }

    /// Length of the cyclically reduced conjugate; the stable length
    /// `lim |w^m| / m` in the Cayley tree.
    pub fn stable_length(&self) -> usize {
        let n = self.len();
        let mut i = 0;
        while 2 * i + 1 < n && self.letters[i] == self.letters[n - 1 - i].inverse() {
            i += 1;
        }
        n - 2 * i
    }

    pub fn is_cyclically_reduced(&self) -> bool {
        self.stable_length() == self.len()
    }

    /// Shortlex comparison (length first, then letter codes).
    pub fn shortlex_cmp(&self, other: &Word) -> std::cmp::Ordering {
        self.len().cmp(&other.len()).then_with(|| self.letters.cmp(&other.letters))
    }

    pub fn commutes_with(&self, other: &Word) -> bool {
        self.multiply(other) == other.multiply(self)
    }
}

pub(crate) fn common_prefix(a: &[Letter], b: &[Letter]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("1");
        }
        for l in &self.letters {
            write!(f, "{}", l.to_char())?;
        }
        Ok(())
    }
}

impl fmt::Debug for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Word({self})")
    }
}

impl FromStr for Word {
    type Err = Error;

    /// Parses `uvU` style notation; `1` or the empty string is the identity.
    /// The input is freely reduced.
    fn from_str(s: &str) -> Result<Word> {
        let s = s.trim();
        if s.is_empty() || s == "1" {
            return Ok(Word::identity());
        }
        let letters = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| Letter::from_char(c).ok_or_else(|| Error::Parse(format!("bad letter {c:?} in word {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Word::reduce(letters))
    }
}

impl Serialize for Word {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Word {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Word, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An integer vector in the abelianization lattice `Z^d`.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AbelianVector(pub Vec<i64>);

impl AbelianVector {
    pub fn zeros(dim: usize) -> AbelianVector {
        AbelianVector(vec![0; dim])
    }

    pub fn unit(dim: usize, i: usize) -> AbelianVector {
        let mut v = AbelianVector::zeros(dim);
        v.0[i] = 1;
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&x| x as f64).collect()
    }

    #[inline]
    pub fn add_scaled(&mut self, other: &AbelianVector, k: i64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += k * b;
        }
    }
}

impl fmt::Debug for AbelianVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl AddAssign<&AbelianVector> for AbelianVector {
    fn add_assign(&mut self, rhs: &AbelianVector) {
        self.add_scaled(rhs, 1);
    }
}

impl Add for &AbelianVector {
    type Output = AbelianVector;
    fn add(self, rhs: &AbelianVector) -> AbelianVector {
        let mut v = self.clone();
        v += rhs;
        v
    }
}

impl Sub for &AbelianVector {
    type Output = AbelianVector;
    fn sub(self, rhs: &AbelianVector) -> AbelianVector {
        let mut v = self.clone();
        v.add_scaled(rhs, -1);
        v
    }
}

impl Neg for &AbelianVector {
    type Output = AbelianVector;
    fn neg(self) -> AbelianVector {
        AbelianVector(self.0.iter().map(|x| -x).collect())
    }
}

/// The morphism `pi: F_k -> Z^d`, given by the images of the generators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projection {
    images: Vec<AbelianVector>,
}

impl Projection {
    /// `u_i -> e_i` in `Z^k`.
    pub fn canonical(rank: usize) -> Projection {
        Projection { images: (0..rank).map(|i| AbelianVector::unit(rank, i)).collect() }
    }

    pub fn new(images: Vec<AbelianVector>) -> Result<Projection> {
        let Some(d) = images.first().map(AbelianVector::dim) else {
            return Err(Error::InvalidInput("projection needs at least one generator image".into()));
        };
        if d == 0 || images.iter().any(|v| v.dim() != d) {
            return Err(Error::InvalidInput("projection images must share a positive dimension".into()));
        }
        Ok(Projection { images })
    }

    pub fn rank(&self) -> usize {
        self.images.len()
    }

    pub fn dim(&self) -> usize {
        self.images[0].dim()
    }

    pub fn images(&self) -> &[AbelianVector] {
        &self.images
    }

    #[inline]
    pub fn add_letter(&self, acc: &mut AbelianVector, letter: Letter) {
        acc.add_scaled(&self.images[letter.generator()], letter.sign());
    }

    pub fn abelianize(&self, w: &Word) -> AbelianVector {
        let mut v = AbelianVector::zeros(self.dim());
        for &l in w.letters() {
            self.add_letter(&mut v, l);
        }
        v
    }

    pub fn abelianize_letters(&self, letters: &[Letter]) -> AbelianVector {
        let mut v = AbelianVector::zeros(self.dim());
        for &l in letters {
            self.add_letter(&mut v, l);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Word {
        s.parse().unwrap()
    }

    fn raw(s: &str) -> Vec<Letter> {
        s.chars().map(|c| Letter::from_char(c).unwrap()).collect()
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(Word::reduce(raw("uU")), Word::identity());
        assert_eq!(Word::reduce(raw("uvVu")), w("uu"));
        let r = Word::reduce(raw("uvUvv"));
        assert_eq!(Word::reduce(r.letters().iter().copied()), r);
    }

    #[test]
    fn multiply_examples() {
        assert_eq!(w("uv").multiply(&w("Vu")), w("uu"));
        assert_eq!(w("uvUV").multiply(&w("uvUV").invert()), Word::identity());
        assert_eq!(w("u").multiply(&w("v")), w("uv"));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(w("uv").invert(), w("VU"));
        assert_eq!(Word::identity().invert(), Word::identity());
    }

    #[test]
    fn abelianize_examples() {
        let pi = Projection::canonical(2);
        assert_eq!(pi.abelianize(&w("u")).0, vec![1, 0]);
        assert_eq!(pi.abelianize(&w("uvUV")).0, vec![0, 0]);
        assert_eq!(pi.abelianize(&w("uV")).0, vec![1, -1]);
    }

    #[test]
    fn stable_length_examples() {
        assert_eq!(w("uv").stable_length(), 2);
        assert_eq!(w("uvU").stable_length(), 1);
        assert_eq!(w("u").stable_length(), 1);
        assert_eq!(Word::identity().stable_length(), 0);
        // a single letter conjugated by a long word
        assert_eq!(w("uvvuVVU").stable_length(), 1);
    }

    /// Power-iteration oracle: |w^m| / m, independent of cyclic reduction.
    fn power_iteration(word: &Word, m: u32) -> f64 {
        word.pow(m).len() as f64 / m as f64
    }

    #[test]
    fn stable_length_of_powers_matches_power_iteration() {
        for n in 1..=6u32 {
            let un = w("u").pow(n);
            assert_eq!(un.stable_length(), n as usize);
            for m in 1..=20 {
                assert_eq!(power_iteration(&un, m), n as f64);
            }
        }
    }

    #[test]
    fn parse_display_round_trip() {
        for s in ["1", "u", "uVwX", "VVUU"] {
            assert_eq!(w(s).to_string(), s);
        }
        assert!("u?".parse::<Word>().is_err());
    }

    #[test]
    fn projection_rejects_ragged_images() {
        assert!(Projection::new(vec![AbelianVector(vec![1, 0]), AbelianVector(vec![1])]).is_err());
        assert!(Projection::new(vec![]).is_err());
    }

    pub(crate) fn word_strategy(rank: usize, max_len: usize) -> impl Strategy<Value = Word> {
        prop::collection::vec(0..(2 * rank) as u8, 0..=max_len).prop_map(|codes| Word::reduce(codes.into_iter().map(Letter::from_code)))
    }

    proptest! {
        #[test]
        fn multiply_is_subadditive(a in word_strategy(3, 20), b in word_strategy(3, 20)) {
            prop_assert!(a.multiply(&b).len() <= a.len() + b.len());
            prop_assert_eq!(a.multiply(&b), Word::reduce(a.letters().iter().chain(b.letters()).copied()));
        }

        #[test]
        fn invert_is_involution(a in word_strategy(3, 30)) {
            prop_assert_eq!(a.invert().invert(), a.clone());
            prop_assert!(a.multiply(&a.invert()).is_empty());
        }

        #[test]
        fn stable_length_limit(a in word_strategy(2, 12)) {
            let l = a.stable_length() as f64;
            for m in 1..=50u32 {
                prop_assert!((l - power_iteration(&a, m)).abs() <= a.len() as f64 / m as f64 + 1e-12);
            }
            prop_assert_eq!(a.stable_length(), a.invert().stable_length());
        }
    }
}
