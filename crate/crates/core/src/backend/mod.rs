//! The measurement contract the pipeline runs against.

use rand::Rng;

use crate::error::Result;
use crate::mapping::PhysicalAddress;

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
pub mod hw;
pub mod sim;

pub const PAGE_SIZE: u64 = 4096;

/// A set of allocated physical pages, stored as sorted disjoint byte ranges.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Allocation {
    runs: Vec<(u64, u64)>,
    // prefix[i] = pages in runs[..i]
    prefix: Vec<u64>,
}

impl Allocation {
    /// Builds from page-aligned addresses in any order.
    pub fn from_pages(pages: impl IntoIterator<Item = u64>) -> Self {
        let mut pages: Vec<u64> = pages.into_iter().map(|p| p & !(PAGE_SIZE - 1)).collect();
        pages.sort_unstable();
        pages.dedup();
        Self::from_runs(pages.into_iter().map(|p| (p, p + PAGE_SIZE)))
    }

    /// Builds from `[start, end)` byte ranges; bounds are rounded out to pages.
    pub fn from_runs(runs: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let mut raw: Vec<(u64, u64)> = runs
            .into_iter()
            .filter(|(s, e)| e > s)
            .map(|(s, e)| (s & !(PAGE_SIZE - 1), e.div_ceil(PAGE_SIZE) * PAGE_SIZE))
            .collect();
        raw.sort_unstable();
        let mut merged: Vec<(u64, u64)> = Vec::with_capacity(raw.len());
        for (s, e) in raw {
            match merged.last_mut() {
                Some((_, end)) if s <= *end => *end = (*end).max(e),
                _ => merged.push((s, e)),
            }
        }
        let mut prefix = Vec::with_capacity(merged.len() + 1);
        let mut acc = 0;
        prefix.push(0);
        for (s, e) in &merged {
            acc += (e - s) / PAGE_SIZE;
            prefix.push(acc);
        }
        Allocation { runs: merged, prefix }
    }

    /// A single contiguous region.
    pub fn contiguous(base: u64, bytes: u64) -> Self {
        Self::from_runs([(base, base + bytes)])
    }

    pub fn runs(&self) -> &[(u64, u64)] {
        &self.runs
    }

    pub fn page_count(&self) -> u64 {
        *self.prefix.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn contains(&self, addr: PhysicalAddress) -> bool {
        self.run_index(addr.0).is_some()
    }

    /// True iff every page overlapping `[start, end)` is allocated.
    pub fn covers(&self, start: u64, end: u64) -> bool {
        if end <= start {
            return true;
        }
        match self.run_index(start) {
            Some(i) => self.runs[i].1 >= end,
            None => false,
        }
    }

    fn run_index(&self, addr: u64) -> Option<usize> {
        let i = self.runs.partition_point(|&(s, _)| s <= addr);
        (i > 0 && addr < self.runs[i - 1].1).then(|| i - 1)
    }

    pub fn pages(&self) -> impl Iterator<Item = PhysicalAddress> + '_ {
        self.runs
            .iter()
            .flat_map(|&(s, e)| (s..e).step_by(PAGE_SIZE as usize).map(PhysicalAddress))
    }

    /// The `n`-th allocated page in address order.
    pub fn nth_page(&self, n: u64) -> Option<PhysicalAddress> {
        if n >= self.page_count() {
            return None;
        }
        let i = self.prefix.partition_point(|&p| p <= n) - 1;
        Some(PhysicalAddress(self.runs[i].0 + (n - self.prefix[i]) * PAGE_SIZE))
    }

    /// The first `n` pages in address order.
    pub fn truncated(&self, n: u64) -> Allocation {
        let mut runs = Vec::new();
        let mut left = n;
        for &(s, e) in &self.runs {
            if left == 0 {
                break;
            }
            let take = ((e - s) / PAGE_SIZE).min(left);
            runs.push((s, s + take * PAGE_SIZE));
            left -= take;
        }
        Allocation::from_runs(runs)
    }

    /// Uniformly random 8-byte-aligned address inside the allocation.
    pub fn random_address<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<PhysicalAddress> {
        let page = self.nth_page(rng.random_range(0..self.page_count().max(1)))?;
        Some(PhysicalAddress(page.0 + (rng.random_range(0..PAGE_SIZE) & !7)))
    }

    /// One past the highest allocated byte.
    pub fn end(&self) -> u64 {
        self.runs.last().map_or(0, |r| r.1)
    }
}

/// Raw row access needed to run a hammer test. Only real hardware provides it.
pub trait RowAccess {
    fn write(&mut self, addr: PhysicalAddress, data: &[u8]) -> Result<()>;
    fn read(&mut self, addr: PhysicalAddress, len: usize) -> Result<Vec<u8>>;
    /// Alternately reads and flushes both aggressors `iterations` times.
    fn hammer_pair(&mut self, lo: PhysicalAddress, hi: PhysicalAddress, iterations: u64) -> Result<()>;
}

/// Source of timed address-pair measurements over an allocation of physical pages.
pub trait MemoryBackend {
    /// Replaces the current allocation with `pages` page-aligned physical pages.
    fn allocate(&mut self, pages: u64) -> Result<Allocation>;

    fn allocation(&self) -> &Allocation;

    /// Upper bound on what `allocate` can satisfy.
    fn available_pages(&self) -> u64;

    /// Median latency in cycles of alternately accessing `a` and `b`, over `rounds` repetitions.
    fn measure_pair(&mut self, a: PhysicalAddress, b: PhysicalAddress, rounds: u32) -> Result<f64>;

    /// Number of `measure_pair` calls served so far.
    fn measurement_count(&self) -> u64;

    fn row_access(&mut self) -> Option<&mut dyn RowAccess> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_merge_and_count() {
        let a = Allocation::from_pages([0x3000, 0x0, 0x1000, 0x5000]);
        assert_eq!(a.runs(), &[(0, 0x2000), (0x3000, 0x4000), (0x5000, 0x6000)]);
        assert_eq!(a.page_count(), 4);
        assert_eq!(a.nth_page(2), Some(PhysicalAddress(0x3000)));
        assert_eq!(a.nth_page(4), None);
        assert!(a.contains(PhysicalAddress(0x1fff)));
        assert!(!a.contains(PhysicalAddress(0x2000)));
        assert!(a.covers(0x0, 0x2000));
        assert!(!a.covers(0x0, 0x3000));
    }

    #[test]
    fn truncation_keeps_address_order() {
        let a = Allocation::from_pages([0x0, 0x1000, 0x3000, 0x4000, 0x8000]);
        let t = a.truncated(3);
        let pages: Vec<u64> = t.pages().map(|p| p.0).collect();
        assert_eq!(pages, vec![0x0, 0x1000, 0x3000]);
    }
}
