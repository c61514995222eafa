//! Step 2: bank-address function resolution.
//!
//! 1. [`select_addresses`] picks one address per combination of the candidate
//!    bank bits from a gap-free physical range.
//! 2. [`partition`] groups them into same-bank piles through the timing channel.
//! 3. [`detect_functions`] keeps the XOR masks that are constant on every pile,
//!    drops linear combinations of higher-priority masks and checks that the
//!    result numbers the piles `0..#bank`.

use std::collections::{BTreeSet, HashSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Allocation, MemoryBackend, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::gf2::XorBasis;
use crate::mapping::{BankFunction, PhysicalAddress};
use crate::timing::{is_sbdr, LatencyThreshold};

pub const MAX_CANDIDATE_BITS: usize = 24;
const MAX_ALTERNATIVE_SUBSETS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub pool: Vec<PhysicalAddress>,
    pub range_mask: u64,
    pub miss_mask: u64,
    /// `[start, end)` of the gap-free physical range the pool was drawn from.
    pub page_range: (u64, u64),
    pub b_min: u32,
    pub b_max: u32,
}

pub fn masks_for(candidates: &BTreeSet<u32>) -> Result<(u32, u32, u64, u64)> {
    let (&b_min, &b_max) = candidates
        .first()
        .zip(candidates.last())
        .ok_or(Error::EmptyCandidateBits)?;
    let range_mask = ((1u128 << (b_max + 1)) - (1u128 << b_min)) as u64;
    let miss_mask = (b_min..=b_max)
        .filter(|b| !candidates.contains(b))
        .fold(0u64, |m, b| m | 1 << b);
    Ok((b_min, b_max, range_mask, miss_mask))
}

/// Finds the first allocated page `p` whose bits under the range mask are all
/// set and whose whole range `[p & !range_mask, p]` is allocated, then takes
/// every candidate-bit combination inside it with the non-candidate bits of
/// `[b_min, b_max]` forced to one.
pub fn select_addresses(alloc: &Allocation, candidates: &BTreeSet<u32>) -> Result<SelectionResult> {
    if candidates.len() > MAX_CANDIDATE_BITS {
        return Err(Error::TooManyCandidateBits(candidates.len()));
    }
    let (b_min, b_max, range_mask, miss_mask) = masks_for(candidates)?;
    let page_bits = range_mask & !(PAGE_SIZE - 1);
    let window = alloc
        .pages()
        .filter(|p| p.0 & page_bits == page_bits)
        .map(|p| {
            let start = p.0 & !range_mask;
            (start & !(PAGE_SIZE - 1), ((start | range_mask) & !(PAGE_SIZE - 1)) + PAGE_SIZE)
        })
        .find(|&(s, e)| alloc.covers(s, e))
        .ok_or(Error::NoContiguousRange { range_mask })?;
    // window.0 has every bit of the range cleared
    let base = window.0 | miss_mask;
    let bits: Vec<u32> = candidates.iter().copied().collect();
    let mut pool: Vec<PhysicalAddress> = (0u64..1 << bits.len())
        .map(|combo| {
            let set = bits
                .iter()
                .enumerate()
                .filter(|(i, _)| combo >> i & 1 == 1)
                .fold(0u64, |m, (_, &b)| m | 1 << b);
            PhysicalAddress(base | set)
        })
        .filter(|&a| alloc.contains(a))
        .collect();
    pool.sort_unstable();
    pool.dedup();
    Ok(SelectionResult {
        pool,
        range_mask,
        miss_mask,
        page_range: window,
        b_min,
        b_max,
    })
}

/// Addresses measured to share a bank with `representative`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pile {
    pub representative: PhysicalAddress,
    pub members: Vec<PhysicalAddress>,
}

impl Pile {
    /// Representative included.
    pub fn size(&self) -> usize {
        self.members.len() + 1
    }

    pub fn addresses(&self) -> impl Iterator<Item = PhysicalAddress> + '_ {
        std::iter::once(self.representative).chain(self.members.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionOptions {
    /// Accepted pile size band is `(1 ± delta) * pool / #bank`.
    pub delta: f64,
    /// Minimum fraction of the pool that must end up in piles.
    pub per_threshold: f64,
    /// Defaults to `10 * #bank`.
    pub max_attempts: Option<usize>,
    /// Fresh SBDR tests each scanned candidate must win by majority before joining a pile.
    pub confirm_votes: usize,
    pub rounds: u32,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        PartitionOptions {
            delta: 0.2,
            per_threshold: 0.85,
            max_attempts: None,
            confirm_votes: 9,
            rounds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub piles: Vec<Pile>,
    pub pool_size: usize,
    pub coverage: f64,
    pub attempts: usize,
    pub rejected: usize,
}

impl Partition {
    /// `[(1 - delta) * pile_sz, (1 + delta) * pile_sz]`.
    pub fn size_band(pool_size: usize, banks: u64, delta: f64) -> (f64, f64) {
        let pile_sz = pool_size as f64 / banks as f64;
        ((1.0 - delta) * pile_sz, (1.0 + delta) * pile_sz)
    }
}

/// Partitions `pool` into same-bank piles until one pile per bank is found
/// or the attempt budget is spent. Rejected piles return to the pool.
pub fn partition<R: Rng + ?Sized>(
    pool: &[PhysicalAddress],
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    banks: u64,
    opts: &PartitionOptions,
    rng: &mut R,
) -> Result<Partition> {
    if (pool.len() as u64) < 2 * banks {
        return Err(Error::PoolTooSmall {
            pool: pool.len(),
            banks,
        });
    }
    let (lo, hi) = Partition::size_band(pool.len(), banks, opts.delta);
    let max_attempts = opts.max_attempts.unwrap_or(10 * banks as usize);
    let mut remaining: Vec<PhysicalAddress> = pool.to_vec();
    let mut piles = Vec::new();
    let (mut attempts, mut rejected) = (0, 0);

    while (piles.len() as u64) < banks && !remaining.is_empty() && attempts < max_attempts {
        attempts += 1;
        let rep = remaining[rng.random_range(0..remaining.len())];
        let mut members = Vec::new();
        for &p in remaining.iter().filter(|&&p| p != rep) {
            if is_sbdr(backend, threshold, rep, p, opts.rounds)? && confirm(backend, threshold, rep, p, opts)? {
                members.push(p);
            }
        }
        let size = (members.len() + 1) as f64;
        if size < lo || size > hi {
            rejected += 1;
            continue;
        }
        let taken: HashSet<PhysicalAddress> = members.iter().copied().chain([rep]).collect();
        remaining.retain(|p| !taken.contains(p));
        members.sort_unstable();
        piles.push(Pile {
            representative: rep,
            members,
        });
    }

    let coverage = (pool.len() - remaining.len()) as f64 / pool.len() as f64;
    if coverage < opts.per_threshold {
        return Err(Error::PartitionStalled {
            attempts,
            piles: piles.len(),
            coverage,
        });
    }
    Ok(Partition {
        piles,
        pool_size: pool.len(),
        coverage,
        attempts,
        rejected,
    })
}

fn confirm(
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    rep: PhysicalAddress,
    p: PhysicalAddress,
    opts: &PartitionOptions,
) -> Result<bool> {
    if opts.confirm_votes == 0 {
        return Ok(true);
    }
    let mut yes = 0;
    for done in 0..opts.confirm_votes {
        if is_sbdr(backend, threshold, rep, p, opts.rounds)? {
            yes += 1;
        }
        let left = opts.confirm_votes - done - 1;
        // decided either way
        if 2 * yes > opts.confirm_votes || 2 * (yes + left) <= opts.confirm_votes {
            break;
        }
    }
    Ok(2 * yes > opts.confirm_votes)
}

/// All non-empty subsets of `candidates` with at most `max_bits` bits, by size
/// and then lexicographically (i.e. in priority order).
pub fn gen_xor_masks(candidates: &BTreeSet<u32>, max_bits: Option<usize>) -> Result<Vec<BankFunction>> {
    if candidates.len() > MAX_CANDIDATE_BITS {
        return Err(Error::TooManyCandidateBits(candidates.len()));
    }
    let bits: Vec<u32> = candidates.iter().copied().collect();
    let n = bits.len();
    let max = max_bits.unwrap_or(n).min(n);
    let mut out = Vec::new();
    for k in 1..=max {
        for_each_combination(n, k, |idx| {
            let mask = idx.iter().fold(0u64, |m, &i| m | 1 << bits[i]);
            out.push(BankFunction::from_mask(mask).expect("non-empty"));
            true
        });
    }
    Ok(out)
}

/// Calls `f` with each k-subset of `0..n` in lexicographic order until it returns false.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize]) -> bool) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        if !f(&idx) {
            return;
        }
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Greedy redundancy removal in the given (priority) order: a mask is dropped
/// iff it is a GF(2) combination of masks kept before it.
pub fn remove_redundant(masks: &[BankFunction]) -> (Vec<BankFunction>, Vec<BankFunction>) {
    let mut basis = XorBasis::new();
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for &m in masks {
        if basis.insert(m.mask()) {
            kept.push(m);
        } else {
            dropped.push(m);
        }
    }
    (kept, dropped)
}

/// A mask counts as constant on a pile when at least this fraction of the
/// pile agrees on its value. Noise can slip a stray address into a pile; a
/// mask outside the true function span splits a pile evenly instead.
pub const MIN_AGREEMENT: f64 = 0.9;

/// The value `f` takes on (nearly) all of the pile, if it is constant there.
pub fn pile_value(pile: &Pile, f: BankFunction) -> Option<u64> {
    let ones = pile.addresses().filter(|a| f.eval(*a) == 1).count();
    let n = pile.size();
    let need = (MIN_AGREEMENT * n as f64).ceil() as usize;
    if ones >= need {
        Some(1)
    } else if n - ones >= need {
        Some(0)
    } else {
        None
    }
}

fn pile_index(functions: &[BankFunction], pile: &Pile) -> Option<u64> {
    functions
        .iter()
        .enumerate()
        .try_fold(0u64, |acc, (i, &f)| Some(acc | pile_value(pile, f)? << i))
}

/// True iff `#piles == 2^len` and `functions` number the piles with distinct indices.
pub fn numbers_bijectively(functions: &[BankFunction], piles: &[Pile]) -> bool {
    if piles.len() as u64 != 1u64 << functions.len() {
        return false;
    }
    let mut seen = HashSet::with_capacity(piles.len());
    piles
        .iter()
        .all(|pile| pile_index(functions, pile).is_some_and(|index| seen.insert(index)))
}

/// Pile addresses whose bank index under `functions` differs from their pile's.
pub fn outliers(functions: &[BankFunction], piles: &[Pile]) -> usize {
    piles
        .iter()
        .map(|pile| {
            let index = pile_index(functions, pile);
            pile.addresses()
                .filter(|&a| {
                    let own = functions.iter().enumerate().fold(0u64, |acc, (i, f)| acc | f.eval(a) << i);
                    Some(own) != index
                })
                .count()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionDetection {
    pub functions: Vec<BankFunction>,
    /// Masks constant on every pile.
    pub consistent_masks: usize,
    pub discarded_redundant: Vec<BankFunction>,
    /// Subsets of equally preferred masks that also number the piles bijectively
    /// (the chosen one included); capped.
    pub alternatives: usize,
    /// Pile members the chosen functions place in a different bank than
    /// their pile; nonzero only under measurement noise.
    pub outliers: usize,
}

pub fn detect_functions(
    piles: &[Pile],
    candidates: &BTreeSet<u32>,
    banks: u64,
    max_function_bits: Option<usize>,
) -> Result<FunctionDetection> {
    if !banks.is_power_of_two() {
        return Err(Error::NonPowerOfTwoBanks(banks));
    }
    let needed = banks.trailing_zeros() as usize;
    if needed == 0 {
        return Ok(FunctionDetection {
            functions: Vec::new(),
            consistent_masks: 0,
            discarded_redundant: Vec::new(),
            alternatives: 1,
            outliers: 0,
        });
    }
    if (piles.len() as u64) < banks {
        return Err(Error::UnderdeterminedPiles {
            piles: piles.len(),
            banks,
        });
    }
    let masks = gen_xor_masks(candidates, max_function_bits)?;
    let consistent: Vec<BankFunction> = masks
        .into_par_iter()
        .filter(|&f| piles.iter().all(|pile| pile_value(pile, f).is_some()))
        .collect();
    let (kept, discarded_redundant) = remove_redundant(&consistent);

    let mut chosen = None;
    for_each_combination(kept.len(), needed, |idx| {
        let subset: Vec<BankFunction> = idx.iter().map(|&i| kept[i]).collect();
        if numbers_bijectively(&subset, piles) {
            chosen = Some(subset);
            false
        } else {
            true
        }
    });
    let functions = chosen.ok_or(Error::NoValidBasis { needed })?;

    Ok(FunctionDetection {
        alternatives: count_alternatives(&consistent, piles, needed),
        outliers: outliers(&functions, piles),
        functions,
        consistent_masks: consistent.len(),
        discarded_redundant,
    })
}

/// Masks not in the span of strictly lighter masks are equally preferred
/// representatives; count their bijective `needed`-subsets.
fn count_alternatives(consistent: &[BankFunction], piles: &[Pile], needed: usize) -> usize {
    let mut lighter = XorBasis::new();
    let mut pending = XorBasis::new();
    let mut weight = 0;
    let mut weak = Vec::new();
    for &f in consistent {
        if f.weight() != weight {
            lighter = pending.clone();
            weight = f.weight();
        }
        if !lighter.contains(f.mask()) {
            weak.push(f);
        }
        pending.insert(f.mask());
    }
    let mut count = 0;
    let mut visited = 0;
    for_each_combination(weak.len(), needed, |idx| {
        visited += 1;
        let subset: Vec<BankFunction> = idx.iter().map(|&i| weak[i]).collect();
        if numbers_bijectively(&subset, piles) {
            count += 1;
        }
        visited < MAX_ALTERNATIVE_SUBSETS
    });
    count
}
