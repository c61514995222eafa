//! Step 3: recover row and column bits that also feed bank functions, then
//! assemble the final mapping.

use std::collections::BTreeSet;

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::MemoryBackend;
use crate::coarse::{decide, BitClassification, ProbeOptions};
use crate::error::{Error, Result};
use crate::gf2::parity;
use crate::knowledge::ExpectedBitCounts;
use crate::mapping::{bit_positions, AddressMapping, BankFunction};
use crate::timing::LatencyThreshold;

const MAX_CORRECTION_BITS: usize = 3;

/// Extra bits to flip alongside `flip` so that every function keeps its value.
/// Candidates are tried smallest set first, lowest bits first.
pub fn correction_bits(functions: &[BankFunction], flip: u64, exclude: u64) -> Option<u64> {
    let broken = |mask: u64| functions.iter().any(|f| parity(f.mask() & mask) == 1);
    if !broken(flip) {
        return Some(0);
    }
    let all = functions.iter().fold(0u64, |m, f| m | f.mask());
    let pool = bit_positions(all & !flip & !exclude);
    for size in 1..=MAX_CORRECTION_BITS.min(pool.len()) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let extra = idx.iter().fold(0u64, |m, &i| m | 1 << pool[i]);
            if !broken(flip | extra) {
                return Some(extra);
            }
            let Some(i) = (0..size).rev().find(|&i| idx[i] != i + pool.len() - size) else {
                break;
            };
            idx[i] += 1;
            for j in i + 1..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    None
}

/// For every two-bit function `(a, b)`, flips both bits (plus correction bits
/// that keep the other functions intact). The bank is unchanged, so a conflict
/// means the row changed: `b`, the higher bit, is a row bit. Stops once
/// `expected_rows` is reached. If two-bit functions do not suffice, wider
/// functions are probed two member bits at a time (experimental; no known
/// machine needs it).
pub fn resolve_shared_row_bits<R: Rng + ?Sized>(
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    functions: &[BankFunction],
    coarse: &BitClassification,
    expected_rows: usize,
    opts: &ProbeOptions,
    rng: &mut R,
) -> Result<BTreeSet<u32>> {
    let pure_rows = coarse.row_bits.iter().fold(0u64, |m, b| m | 1 << b);
    let mut shared = BTreeSet::new();
    let probes = functions
        .iter()
        .filter(|f| f.weight() == 2)
        .map(|f| (f.lowest(), f.highest()))
        .collect::<Vec<_>>();
    let wide = functions
        .iter()
        .filter(|f| f.weight() > 2)
        .flat_map(|f| {
            let bits = f.bits();
            (0..bits.len()).flat_map(move |i| (i + 1..bits.len()).map({
                let bits = bits.clone();
                move |j| (bits[i], bits[j])
            }))
        })
        .collect::<Vec<_>>();
    for (experimental, list) in [(false, probes), (true, wide)] {
        for (a, b) in list {
            if coarse.row_bits.len() + shared.len() >= expected_rows {
                return Ok(shared);
            }
            if shared.contains(&b) || coarse.row_bits.contains(&b) {
                continue;
            }
            if experimental {
                warn!("probing bits ({a}, {b}) of a wide function for a shared row bit (experimental)");
            }
            let flip = (1u64 << a) | 1 << b;
            let Some(extra) = correction_bits(functions, flip, pure_rows) else {
                warn!("no correction keeps the bank fixed when flipping ({a}, {b}); bit {b} left unresolved");
                continue;
            };
            let mask = flip | extra;
            let conflict = decide(backend, threshold, opts, b, rng, |_| mask)?;
            debug!("row probe {mask:#x} for ({a}, {b}): conflict = {conflict}");
            if conflict {
                shared.insert(b);
            }
        }
    }
    if coarse.row_bits.len() + shared.len() < expected_rows {
        return Err(Error::RowCountUnreachable {
            found: coarse.row_bits.len() + shared.len(),
            expected: expected_rows,
        });
    }
    Ok(shared)
}

/// Function bits that are neither row bits nor already columns, lowest first,
/// fill the missing column count. When a single function is strictly longest,
/// its lowest bit is excluded: it is the bit that makes it long, not a column.
pub fn resolve_shared_column_bits(
    functions: &[BankFunction],
    row_bits: &BTreeSet<u32>,
    coarse_columns: &BTreeSet<u32>,
    expected_columns: usize,
) -> Result<BTreeSet<u32>> {
    let needed = expected_columns.saturating_sub(coarse_columns.len());
    if needed == 0 {
        return Ok(BTreeSet::new());
    }
    let excluded = column_exclusion_bit(functions);
    let candidates: Vec<u32> = functions
        .iter()
        .flat_map(|f| f.bits())
        .collect::<BTreeSet<u32>>()
        .into_iter()
        .filter(|b| !row_bits.contains(b) && !coarse_columns.contains(b) && Some(*b) != excluded)
        .collect();
    if candidates.len() < needed {
        return Err(Error::ColumnCountUnreachable {
            found: coarse_columns.len() + candidates.len(),
            expected: expected_columns,
        });
    }
    Ok(candidates.into_iter().take(needed).collect())
}

/// Lowest bit of the strictly longest function; `None` when the longest
/// weight is shared by several functions.
pub fn column_exclusion_bit(functions: &[BankFunction]) -> Option<u32> {
    let longest = functions.iter().map(|f| f.weight()).max()?;
    let mut tied = functions.iter().filter(|f| f.weight() == longest);
    let first = tied.next()?;
    tied.next().is_none().then(|| first.lowest())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitOrigin {
    Row,
    SharedRow,
    Column,
    SharedColumn,
    BankOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledMapping {
    pub mapping: AddressMapping,
    /// How each decoded bit was classified.
    pub provenance: Vec<(u32, BitOrigin)>,
}

pub fn assemble(
    functions: &[BankFunction],
    coarse: &BitClassification,
    shared_rows: &BTreeSet<u32>,
    shared_columns: &BTreeSet<u32>,
    expected: &ExpectedBitCounts,
) -> Result<AssembledMapping> {
    if functions.len() != expected.bank_bits as usize {
        return Err(Error::InconsistentCounts(format!(
            "{} bank functions, expected {}",
            functions.len(),
            expected.bank_bits
        )));
    }
    let rows: BTreeSet<u32> = coarse.row_bits.union(shared_rows).copied().collect();
    let columns: BTreeSet<u32> = coarse.column_bits.union(shared_columns).copied().collect();
    if let Some(b) = rows.intersection(&columns).next() {
        return Err(Error::InconsistentCounts(format!("bit {b} classified as both row and column")));
    }
    if rows.len() != expected.row_bits as usize {
        return Err(Error::RowCountUnreachable {
            found: rows.len(),
            expected: expected.row_bits as usize,
        });
    }
    if columns.len() != expected.column_bits as usize {
        return Err(Error::ColumnCountUnreachable {
            found: columns.len(),
            expected: expected.column_bits as usize,
        });
    }
    let function_bits: BTreeSet<u32> = functions.iter().flat_map(|f| f.bits()).collect();
    let mut provenance: Vec<(u32, BitOrigin)> = rows
        .iter()
        .map(|&b| (b, if shared_rows.contains(&b) { BitOrigin::SharedRow } else { BitOrigin::Row }))
        .chain(columns.iter().map(|&b| {
            let origin = if shared_columns.contains(&b) {
                BitOrigin::SharedColumn
            } else {
                BitOrigin::Column
            };
            (b, origin)
        }))
        .chain(
            function_bits
                .iter()
                .filter(|b| !rows.contains(b) && !columns.contains(b))
                .map(|&b| (b, BitOrigin::BankOnly)),
        )
        .collect();
    provenance.sort_unstable_by_key(|p| p.0);
    Ok(AssembledMapping {
        mapping: AddressMapping::new(
            functions.to_vec(),
            rows.into_iter().collect(),
            columns.into_iter().collect(),
        ),
        provenance,
    })
}
