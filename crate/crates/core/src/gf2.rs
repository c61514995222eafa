//! Linear algebra over GF(2) on `u64` bit vectors.

/// Parity of the set bits of `value` (1 if odd).
#[inline]
pub fn parity(value: u64) -> u64 {
    (value.count_ones() & 1) as u64
}

/// Incrementally built XOR basis, one pivot per leading bit.
#[derive(Debug, Clone)]
pub struct XorBasis {
    // pivots[b] holds a vector whose highest set bit is b, or 0.
    pivots: [u64; 64],
    rank: usize,
}

impl Default for XorBasis {
    fn default() -> Self {
        XorBasis { pivots: [0; 64], rank: 0 }
    }
}

impl XorBasis {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Reduces `v` against the basis; returns the residue (0 iff `v` is in the span).
    pub fn reduce(&self, mut v: u64) -> u64 {
        while v != 0 {
            let top = 63 - v.leading_zeros() as usize;
            if self.pivots[top] == 0 {
                return v;
            }
            v ^= self.pivots[top];
        }
        0
    }

    pub fn contains(&self, v: u64) -> bool {
        self.reduce(v) == 0
    }

    /// Adds `v` if it is independent of the current basis.
    pub fn insert(&mut self, v: u64) -> bool {
        let r = self.reduce(v);
        if r == 0 {
            return false;
        }
        let top = 63 - r.leading_zeros() as usize;
        self.pivots[top] = r;
        self.rank += 1;
        true
    }
}

pub fn rank(vectors: &[u64]) -> usize {
    let mut basis = XorBasis::new();
    for &v in vectors {
        basis.insert(v);
    }
    basis.rank()
}

/// Every element of the span of `generators`, including 0. Caller bounds the rank.
pub fn span(generators: &[u64]) -> Vec<u64> {
    let mut basis = Vec::new();
    let mut b = XorBasis::new();
    for &g in generators {
        if b.insert(g) {
            basis.push(g);
        }
    }
    let mut out = Vec::with_capacity(1 << basis.len());
    for combo in 0u64..(1u64 << basis.len()) {
        let mut v = 0;
        for (i, &g) in basis.iter().enumerate() {
            if combo >> i & 1 == 1 {
                v ^= g;
            }
        }
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_rejects_dependent_vectors() {
        let mut b = XorBasis::new();
        assert!(b.insert(0b0011));
        assert!(b.insert(0b0110));
        assert!(!b.insert(0b0101));
        assert!(!b.insert(0));
        assert_eq!(b.rank(), 2);
        assert!(b.contains(0b0101));
        assert!(!b.contains(0b1000));
    }

    #[test]
    fn span_size_is_power_of_rank() {
        let s = span(&[0b001, 0b010, 0b011, 0b100]);
        assert_eq!(s.len(), 8);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
    }

    #[test]
    fn parity_counts_bits() {
        assert_eq!(parity(0), 0);
        assert_eq!(parity(0b1011), 1);
        assert_eq!(parity(u64::MAX), 0);
    }
}

#[cfg(test)]
mod props {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    // log2 of the number of distinct subset XORs
    fn enumerated_rank(v: &[u64]) -> usize {
        let mut seen = HashSet::new();
        for subset in 0u32..1 << v.len() {
            let x = v.iter().enumerate().filter(|(i, _)| subset >> i & 1 == 1).fold(0, |x, (_, m)| x ^ m);
            seen.insert(x);
        }
        seen.len().trailing_zeros() as usize
    }

    proptest! {
        #[test]
        fn rank_matches_enumeration(v in prop::collection::vec(0u64..1024, 0..10)) {
            prop_assert_eq!(rank(&v), enumerated_rank(&v));
        }

        #[test]
        fn span_is_a_closed_subspace(v in prop::collection::vec(0u64..256, 0..6)) {
            let s: HashSet<u64> = span(&v).into_iter().collect();
            prop_assert_eq!(s.len(), 1 << rank(&v));
            for a in &s {
                for b in &s {
                    prop_assert!(s.contains(&(a ^ b)));
                }
            }
            for g in &v {
                prop_assert!(s.contains(g));
            }
        }
    }
}
