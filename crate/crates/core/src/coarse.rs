//! Step 1: coarse partition of physical-address bits into row, column and
//! bank-candidate bits using single- and double-bit flip probes.
//!
//! Bits that index a row (or column) *and* feed a bank function flip the bank
//! too, so they never look like row/column bits here; they land in the bank
//! candidates and are recovered by the fine-grained step.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Allocation, MemoryBackend};
use crate::error::{Error, Result};
use crate::mapping::PhysicalAddress;
use crate::timing::{is_sbdr, LatencyThreshold};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// Distinct base addresses per decision (majority vote).
    pub votes: usize,
    /// Draws per latency measurement.
    pub rounds: u32,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions { votes: 5, rounds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitClassification {
    pub row_bits: BTreeSet<u32>,
    pub column_bits: BTreeSet<u32>,
    pub bank_candidate_bits: BTreeSet<u32>,
    /// Inclusive `[low_bit, high_bit]`.
    pub tested_range: (u32, u32),
    /// Bits the column probe could not reach (no row bit to pair with).
    pub untested_bits: BTreeSet<u32>,
}

const TRIES_PER_VOTE: usize = 256;
const ESCALATION: usize = 3;

/// Up to `votes` pairs `(p, p ^ flip)` with distinct bases, both inside the
/// allocation. `flip` is drawn per attempt so callers can vary the partner bit.
pub(crate) fn sample_pairs<R: Rng + ?Sized>(
    alloc: &Allocation,
    votes: usize,
    rng: &mut R,
    mut flip: impl FnMut(&mut R) -> u64,
) -> Vec<(PhysicalAddress, PhysicalAddress)> {
    let mut bases = BTreeSet::new();
    let mut pairs = Vec::with_capacity(votes);
    for _ in 0..votes * TRIES_PER_VOTE {
        if pairs.len() == votes {
            break;
        }
        let Some(p) = alloc.random_address(rng) else {
            break;
        };
        let mask = flip(rng);
        let q = p ^ mask;
        if alloc.contains(q) && bases.insert(p.0.min(q.0)) {
            pairs.push((p, q));
        }
    }
    pairs
}

/// Majority over the first `votes` pairs; a split vote is re-decided by the
/// majority over all `pairs` (up to three times as many).
pub(crate) fn escalating_vote(
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    pairs: &[(PhysicalAddress, PhysicalAddress)],
    votes: usize,
    rounds: u32,
) -> Result<bool> {
    let (first, rest) = pairs.split_at(votes.min(pairs.len()));
    let mut yes = 0;
    for &(a, b) in first {
        yes += usize::from(is_sbdr(backend, threshold, a, b, rounds)?);
    }
    if yes == 0 || yes == first.len() || rest.is_empty() {
        return Ok(2 * yes > first.len());
    }
    for &(a, b) in rest {
        yes += usize::from(is_sbdr(backend, threshold, a, b, rounds)?);
    }
    Ok(2 * yes > pairs.len())
}

pub(crate) fn decide<R: Rng + ?Sized>(
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    opts: &ProbeOptions,
    bit: u32,
    rng: &mut R,
    flip: impl FnMut(&mut R) -> u64,
) -> Result<bool> {
    let votes = opts.votes.max(1);
    let alloc = backend.allocation().clone();
    let pairs = sample_pairs(&alloc, ESCALATION * votes, rng, flip);
    if pairs.len() < votes {
        return Err(Error::InsufficientAddressPairs(bit));
    }
    escalating_vote(backend, threshold, &pairs, votes, opts.rounds)
}

/// A bit is a row bit iff flipping it alone yields a row-buffer conflict.
pub fn detect_row_bits<R: Rng + ?Sized>(
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    tested: (u32, u32),
    opts: &ProbeOptions,
    rng: &mut R,
) -> Result<BTreeSet<u32>> {
    let mut rows = BTreeSet::new();
    for bit in tested.0..=tested.1 {
        if decide(backend, threshold, opts, bit, rng, |_| 1 << bit)? {
            rows.insert(bit);
        }
    }
    Ok(rows)
}

/// A non-row bit is a column bit iff flipping it together with a known row bit
/// still conflicts: the pair stayed in the bank, so the bit is not a bank bit.
pub fn detect_column_bits<R: Rng + ?Sized>(
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    tested: (u32, u32),
    row_bits: &BTreeSet<u32>,
    opts: &ProbeOptions,
    rng: &mut R,
) -> Result<BTreeSet<u32>> {
    if row_bits.is_empty() {
        return Err(Error::InconsistentCounts("column detection needs at least one row bit".into()));
    }
    let rows: Vec<u32> = row_bits.iter().copied().collect();
    let mut cols = BTreeSet::new();
    for bit in (tested.0..=tested.1).filter(|b| !row_bits.contains(b)) {
        let flip = |rng: &mut R| (1u64 << bit) | 1 << rows[rng.random_range(0..rows.len())];
        if decide(backend, threshold, opts, bit, rng, flip)? {
            cols.insert(bit);
        }
    }
    Ok(cols)
}

/// Row detection, then column detection; whatever is left is a bank candidate.
pub fn classify_bits<R: Rng + ?Sized>(
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    tested: (u32, u32),
    opts: &ProbeOptions,
    rng: &mut R,
) -> Result<BitClassification> {
    let row_bits = detect_row_bits(backend, threshold, tested, opts, rng)?;
    let all: BTreeSet<u32> = (tested.0..=tested.1).collect();
    let (column_bits, untested_bits) = if row_bits.is_empty() {
        (BTreeSet::new(), all.clone())
    } else {
        (
            detect_column_bits(backend, threshold, tested, &row_bits, opts, rng)?,
            BTreeSet::new(),
        )
    };
    let bank_candidate_bits = all
        .iter()
        .filter(|b| !row_bits.contains(b) && !column_bits.contains(b))
        .copied()
        .collect();
    Ok(BitClassification {
        row_bits,
        column_bits,
        bank_candidate_bits,
        tested_range: tested,
        untested_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::sim::{LatencyModel, SimBackend, SimLayout};
    use crate::mapping::AddressMapping;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(map: &str, gib: u64, seed: u64) -> BitClassification {
        let truth = AddressMapping::parse(map).unwrap();
        let mut b = SimBackend::new(truth, gib << 30, LatencyModel::default(), &SimLayout::contiguous(), seed).unwrap();
        let pages = b.available_pages();
        b.allocate(pages).unwrap();
        let t = LatencyThreshold::fixed(200.0, 400.0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = 63 - (gib << 30).leading_zeros() - 1;
        classify_bits(&mut b, &t, (0, top), &ProbeOptions::default(), &mut rng).unwrap()
    }

    const NO1: &str = "functions = [[6],[14,17],[15,18],[16,19]]\nrow_bits = 17..32\ncolumn_bits = [0..5, 7..13]";

    #[test]
    fn no1_coarse_sets() {
        let c = run(NO1, 8, 3);
        assert_eq!(c.row_bits, (20..=32).collect());
        assert_eq!(c.column_bits, (0..=5).chain(7..=13).collect());
        assert_eq!(c.bank_candidate_bits, [6, 14, 15, 16, 17, 18, 19].into_iter().collect());
        assert!(!c.column_bits.contains(&6));
    }

    #[test]
    fn seed_does_not_change_noiseless_result() {
        assert_eq!(run(NO1, 8, 1), run(NO1, 8, 99));
    }

    #[test]
    fn single_row_config_has_no_row_bits() {
        // one bank, every bit a column bit
        let c = run("functions = []\nrow_bits = []\ncolumn_bits = 0..29", 1, 0);
        assert!(c.row_bits.is_empty());
        assert!(c.column_bits.is_empty());
        assert_eq!(c.untested_bits.len(), 30);
        assert_eq!(c.bank_candidate_bits.len(), 30);
    }

    #[test]
    fn untestable_bit_is_reported() {
        let truth = AddressMapping::parse(NO1).unwrap();
        let mut b = SimBackend::new(truth, 8 << 30, LatencyModel::default(), &SimLayout::contiguous(), 0).unwrap();
        b.allocate(1 << 18).unwrap(); // 1 GiB: bits >= 30 have no partner
        let t = LatencyThreshold::fixed(200.0, 400.0, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = detect_row_bits(&mut b, &t, (0, 32), &ProbeOptions::default(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::InsufficientAddressPairs(30)));
    }
}
