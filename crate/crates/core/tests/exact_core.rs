use geowind_core::tree::{busemann_cocycle, gromov_product, horofunction};
use geowind_core::{BoundaryWord, Letter, Projection, Word};
use proptest::prelude::*;

const RANK: usize = 3;

fn letter() -> impl Strategy<Value = Letter> {
    (0..RANK, any::<bool>()).prop_map(|(g, i)| Letter::new(g, i))
}

fn word(max: usize) -> impl Strategy<Value = Word> {
    prop::collection::vec(letter(), 0..max).prop_map(Word::reduce)
}

/// An eventually periodic boundary point; the period is cyclically reduced
/// and does not cancel against the prefix.
fn boundary() -> impl Strategy<Value = BoundaryWord> {
    (word(10), word(6)).prop_filter_map("needs a usable period", |(prefix, period)| {
        if period.is_empty() || !period.is_cyclically_reduced() || prefix.last() == period.first().map(Letter::inverse) {
            return None;
        }
        BoundaryWord::eventually_periodic(prefix, period).ok()
    })
}

proptest! {
    #[test]
    fn reduction_is_idempotent_and_inverse_free(raw in prop::collection::vec(letter(), 0..60)) {
        let w = Word::reduce(raw.iter().copied());
        prop_assert!(w.letters().windows(2).all(|p| p[0] != p[1].inverse()));
        prop_assert_eq!(Word::reduce(w.letters().iter().copied()), w.clone());
        prop_assert!(w.len() <= raw.len() && (raw.len() - w.len()).is_multiple_of(2));
    }

    #[test]
    fn group_axioms(a in word(20), b in word(20), c in word(20)) {
        prop_assert_eq!(a.multiply(&b).multiply(&c), a.multiply(&b.multiply(&c)));
        prop_assert!(a.multiply(&a.invert()).is_empty());
        prop_assert_eq!(a.multiply(&b).invert(), b.invert().multiply(&a.invert()));
        let ab = a.multiply(&b);
        prop_assert_eq!(ab.len() + 2 * a.invert().common_prefix_len(&b), a.len() + b.len());
    }

    #[test]
    fn projection_is_a_homomorphism(a in word(20), b in word(20)) {
        let pi = Projection::canonical(RANK);
        let lhs = pi.abelianize(&a.multiply(&b));
        let mut rhs = pi.abelianize(&a);
        rhs += &pi.abelianize(&b);
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn busemann_cocycle_relation(g1 in word(12), g2 in word(12), xi in boundary()) {
        let lhs = busemann_cocycle(&g2.multiply(&g1), &xi).unwrap();
        let rhs = busemann_cocycle(&g2, &xi.translate(&g1).unwrap()).unwrap() + busemann_cocycle(&g1, &xi).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn busemann_bound_and_equality(g in word(12), xi in boundary()) {
        let s = busemann_cocycle(&g, &xi).unwrap();
        prop_assert!(s.abs() <= g.len() as i64);
        let agree = gromov_product(&g.invert(), &xi).unwrap();
        prop_assert_eq!(s, g.len() as i64 - 2 * agree as i64);
        prop_assert_eq!(horofunction(&xi, &g.invert()).unwrap(), s);
    }

    #[test]
    fn stable_length_is_a_conjugacy_invariant(w in word(20), h in word(10)) {
        let conj = h.multiply(&w).multiply(&h.invert());
        prop_assert_eq!(conj.stable_length(), w.stable_length());
        prop_assert_eq!(w.pow(3).stable_length(), 3 * w.stable_length());
    }
}
