//! Double-sided hammer triples from a recovered mapping, and a minimal
//! hammer test for backends with raw row access.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{Allocation, MemoryBackend, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::mapping::{AddressMapping, PhysicalAddress};

const LINE: u64 = 64;

/// Two aggressor rows sandwiching a victim row, all in one bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HammerTriple {
    pub bank: u64,
    /// Victim row index.
    pub row: u64,
    pub aggressor_lo: PhysicalAddress,
    pub victim: PhysicalAddress,
    pub aggressor_hi: PhysicalAddress,
}

/// Lowest allocated address of every (bank, row), sampled at the granularity
/// of the lowest bit that can change either.
fn row_starts(mapping: &AddressMapping, alloc: &Allocation) -> BTreeMap<(u64, u64), PhysicalAddress> {
    let significant = mapping.row_mask() | mapping.function_bit_mask();
    let step = if significant == 0 { PAGE_SIZE } else { 1u64 << significant.trailing_zeros() };
    let mut starts = BTreeMap::new();
    for &(s, e) in alloc.runs() {
        let mut addr = s.div_ceil(step) * step;
        while addr < e {
            let d = mapping.map(PhysicalAddress(addr));
            starts.entry((d.bank, d.row)).or_insert(PhysicalAddress(addr));
            addr += step;
        }
    }
    starts
}

/// Every `(r - 1, r, r + 1)` row triple of one bank fully inside the allocation,
/// ordered by bank, then row.
pub fn generate_triples(mapping: &AddressMapping, alloc: &Allocation) -> Result<Vec<HammerTriple>> {
    let starts = row_starts(mapping, alloc);
    let triples: Vec<HammerTriple> = starts
        .iter()
        .filter_map(|(&(bank, row), &victim)| {
            let lo = starts.get(&(bank, row.checked_sub(1)?))?;
            let hi = starts.get(&(bank, row + 1))?;
            Some(HammerTriple {
                bank,
                row,
                aggressor_lo: *lo,
                victim,
                aggressor_hi: *hi,
            })
        })
        .collect();
    if triples.is_empty() {
        return Err(Error::NoTriplesAvailable);
    }
    Ok(triples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitFlip {
    pub address: PhysicalAddress,
    pub expected: u8,
    pub observed: u8,
    pub bank: u64,
    pub row: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipReport {
    pub triples_tested: usize,
    pub iterations: u64,
    pub flips: Vec<BitFlip>,
}

impl FlipReport {
    pub fn flipped_bits(&self) -> u32 {
        self.flips.iter().map(|f| (f.expected ^ f.observed).count_ones()).sum()
    }
}

/// Cache lines of the victim's page that decode to the victim's bank and row.
fn victim_lines(mapping: &AddressMapping, t: &HammerTriple) -> Vec<PhysicalAddress> {
    let page = t.victim.0 & !(PAGE_SIZE - 1);
    (page..page + PAGE_SIZE)
        .step_by(LINE as usize)
        .map(PhysicalAddress)
        .filter(|&a| {
            let d = mapping.map(a);
            d.bank == t.bank && d.row == t.row
        })
        .collect()
}

/// Fills victim lines with a pattern and the aggressors with its inverse,
/// hammers, and reports every victim byte that changed. Patterns: all ones,
/// then all zeros.
pub fn hammer(
    backend: &mut dyn MemoryBackend,
    mapping: &AddressMapping,
    triples: &[HammerTriple],
    iterations: u64,
) -> Result<FlipReport> {
    let access = backend
        .row_access()
        .ok_or(Error::BackendUnsupported("raw row access for hammering"))?;
    let mut report = FlipReport {
        iterations,
        ..FlipReport::default()
    };
    for t in triples {
        let lines = victim_lines(mapping, t);
        for pattern in [0xFFu8, 0x00] {
            let fill = [pattern; LINE as usize];
            let inverse = [!pattern; LINE as usize];
            for &line in &lines {
                access.write(line, &fill)?;
            }
            for agg in [t.aggressor_lo, t.aggressor_hi] {
                access.write(PhysicalAddress(agg.0 & !(LINE - 1)), &inverse)?;
            }
            access.hammer_pair(t.aggressor_lo, t.aggressor_hi, iterations)?;
            for &line in &lines {
                let data = access.read(line, LINE as usize)?;
                report.flips.extend(data.iter().enumerate().filter(|(_, &b)| b != pattern).map(|(i, &b)| {
                    BitFlip {
                        address: PhysicalAddress(line.0 + i as u64),
                        expected: pattern,
                        observed: b,
                        bank: t.bank,
                        row: t.row,
                    }
                }));
            }
        }
        report.triples_tested += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::backend::sim::{LatencyModel, SimBackend, SimLayout};
    use crate::backend::RowAccess;

    fn no4() -> AddressMapping {
        AddressMapping::parse("functions = [[13, 16], [14, 17], [15, 18]]\nrow_bits = 16..31\ncolumn_bits = 0..12").unwrap()
    }

    #[test]
    fn triples_share_bank_and_are_adjacent() {
        let m = no4();
        let alloc = Allocation::contiguous(0, 2 << 20);
        let triples = generate_triples(&m, &alloc).unwrap();
        assert!(!triples.is_empty());
        for t in &triples {
            let (lo, v, hi) = (m.map(t.aggressor_lo), m.map(t.victim), m.map(t.aggressor_hi));
            assert_eq!((lo.bank, v.bank, hi.bank), (t.bank, t.bank, t.bank));
            assert_eq!((lo.row + 1, v.row, hi.row - 1), (t.row, t.row, t.row));
            assert_eq!(v.column, 0);
        }
        assert!(triples.windows(2).all(|w| (w[0].bank, w[0].row) < (w[1].bank, w[1].row)));
        // 32 rows, each bank sees all of them: 30 triples per bank
        assert_eq!(triples.len(), 8 * 30);
    }

    #[test]
    fn single_bank_rows_stack_directly() {
        let m = AddressMapping::parse("functions = []\nrow_bits = 13..29\ncolumn_bits = 0..12").unwrap();
        let triples = generate_triples(&m, &Allocation::contiguous(0, 64 << 10)).unwrap();
        assert_eq!(triples.len(), 6);
        for t in &triples {
            assert_eq!(t.bank, 0);
            assert_eq!(t.victim.0, t.row << 13);
            assert_eq!((t.aggressor_lo.0 + 0x2000, t.aggressor_hi.0 - 0x2000), (t.victim.0, t.victim.0));
        }
    }

    #[test]
    fn single_row_has_no_triples() {
        let alloc = Allocation::contiguous(0, 64 << 10);
        assert!(matches!(generate_triples(&no4(), &alloc), Err(Error::NoTriplesAvailable)));
    }

    #[test]
    fn simulator_cannot_hammer() {
        let mut b = SimBackend::new(no4(), 4 << 30, LatencyModel::default(), &SimLayout::contiguous(), 0).unwrap();
        let err = hammer(&mut b, &no4(), &[], 1).unwrap_err();
        assert!(matches!(err, Error::BackendUnsupported(_)));
    }

    /// Memory that flips bit 0 of the first victim byte when hammered.
    struct Flaky {
        mem: HashMap<u64, u8>,
        victim: u64,
        alloc: Allocation,
    }

    impl RowAccess for Flaky {
        fn write(&mut self, addr: PhysicalAddress, data: &[u8]) -> Result<()> {
            for (i, &b) in data.iter().enumerate() {
                self.mem.insert(addr.0 + i as u64, b);
            }
            Ok(())
        }
        fn read(&mut self, addr: PhysicalAddress, len: usize) -> Result<Vec<u8>> {
            Ok((0..len as u64).map(|i| self.mem[&(addr.0 + i)]).collect())
        }
        fn hammer_pair(&mut self, _: PhysicalAddress, _: PhysicalAddress, _: u64) -> Result<()> {
            *self.mem.get_mut(&self.victim).unwrap() ^= 1;
            Ok(())
        }
    }

    impl MemoryBackend for Flaky {
        fn allocate(&mut self, _: u64) -> Result<Allocation> {
            Ok(self.alloc.clone())
        }
        fn allocation(&self) -> &Allocation {
            &self.alloc
        }
        fn available_pages(&self) -> u64 {
            self.alloc.page_count()
        }
        fn measure_pair(&mut self, _: PhysicalAddress, _: PhysicalAddress, _: u32) -> Result<f64> {
            Ok(0.0)
        }
        fn measurement_count(&self) -> u64 {
            0
        }
        fn row_access(&mut self) -> Option<&mut dyn RowAccess> {
            Some(self)
        }
    }

    #[test]
    fn flips_are_reported_for_both_patterns() {
        let m = no4();
        let alloc = Allocation::contiguous(0, 2 << 20);
        let triples = generate_triples(&m, &alloc).unwrap();
        let t = triples[0];
        let mut b = Flaky {
            mem: HashMap::new(),
            victim: t.victim.0,
            alloc,
        };
        let report = hammer(&mut b, &m, &[t], 1000).unwrap();
        assert_eq!(report.triples_tested, 1);
        assert_eq!(report.flips.len(), 2);
        assert_eq!((report.flips[0].expected, report.flips[0].observed), (0xFF, 0xFE));
        assert_eq!((report.flips[1].expected, report.flips[1].observed), (0x00, 0x01));
        assert_eq!(report.flipped_bits(), 2);
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;
    use crate::fixtures::FIXTURES;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn triples_are_same_bank_adjacent_rows(n in 0usize..9, base_mib in 0u64..512, span_kib in 256u64..=2048) {
            let m = FIXTURES[n].truth().unwrap();
            let alloc = Allocation::contiguous(base_mib << 20, span_kib << 10);
            let Ok(triples) = generate_triples(&m, &alloc) else {
                return Ok(());
            };
            for t in &triples {
                let [lo, v, hi] = [t.aggressor_lo, t.victim, t.aggressor_hi].map(|a| m.map(a));
                prop_assert!([t.aggressor_lo, t.victim, t.aggressor_hi].iter().all(|&a| alloc.contains(a)));
                prop_assert_eq!((lo.bank, v.bank, hi.bank), (t.bank, t.bank, t.bank));
                prop_assert_eq!((lo.row + 1, v.row, hi.row), (v.row, t.row, v.row + 1));
            }
        }
    }
}
