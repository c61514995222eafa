//! Real-machine backend for Linux/x86-64: anonymous mappings translated
//! through `/proc/self/pagemap`, `clflush` before every access and
//! `rdtscp`-fenced timing. Reading PFNs from pagemap needs CAP_SYS_ADMIN.

use std::collections::HashMap;
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::ptr;

use core::arch::x86_64::{__rdtscp, _mm_clflush, _mm_lfence, _mm_mfence};

use super::{Allocation, MemoryBackend, RowAccess, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::mapping::PhysicalAddress;

/// Access pairs timed per round; the round's latency is the mean.
const ACCESSES_PER_ROUND: u32 = 32;

struct Mapping {
    ptr: *mut u8,
    len: usize,
}

impl Drop for Mapping {
    fn drop(&mut self) {
        // SAFETY: ptr/len come from a successful mmap and are unmapped once.
        unsafe {
            libc::munmap(self.ptr.cast(), self.len);
        }
    }
}

pub struct HwBackend {
    mapping: Option<Mapping>,
    // physical page -> virtual page
    phys_to_virt: HashMap<u64, usize>,
    allocation: Allocation,
    measurements: u64,
}

impl HwBackend {
    pub fn new() -> Result<Self> {
        File::open("/proc/self/pagemap").map_err(|e| Error::Hardware(format!("cannot open pagemap: {e}")))?;
        Ok(HwBackend {
            mapping: None,
            phys_to_virt: HashMap::new(),
            allocation: Allocation::default(),
            measurements: 0,
        })
    }

    fn virt(&self, addr: PhysicalAddress) -> Result<*mut u8> {
        let page = addr.0 & !(PAGE_SIZE - 1);
        let base = self
            .phys_to_virt
            .get(&page)
            .ok_or(Error::AddressOutsideAllocation(addr.0))?;
        Ok((base + (addr.0 - page) as usize) as *mut u8)
    }
}

fn translate(pagemap: &File, virt: usize) -> Result<u64> {
    let mut entry = [0u8; 8];
    let offset = (virt as u64 / PAGE_SIZE) * 8;
    pagemap.read_exact_at(&mut entry, offset)?;
    let entry = u64::from_le_bytes(entry);
    if entry >> 63 == 0 {
        return Err(Error::Hardware(format!("page at {virt:#x} not present")));
    }
    let pfn = entry & ((1 << 55) - 1);
    if pfn == 0 {
        return Err(Error::Hardware("pagemap hides PFNs; CAP_SYS_ADMIN is required".into()));
    }
    Ok(pfn * PAGE_SIZE)
}

fn available_bytes() -> u64 {
    std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("MemAvailable:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|kb| kb.parse::<u64>().ok())
        })
        .map_or(0, |kb| kb * 1024)
}

/// Cycles for one flushed access to `a` followed by one to `b`.
///
/// # Safety
/// Both pointers must be readable.
unsafe fn time_pair(a: *const u8, b: *const u8) -> u64 {
    let mut aux = 0;
    _mm_clflush(a);
    _mm_clflush(b);
    _mm_mfence();
    let start = __rdtscp(&mut aux);
    _mm_lfence();
    ptr::read_volatile(a);
    ptr::read_volatile(b);
    let end = __rdtscp(&mut aux);
    _mm_lfence();
    end.wrapping_sub(start)
}

impl MemoryBackend for HwBackend {
    fn allocate(&mut self, pages: u64) -> Result<Allocation> {
        let available = self.available_pages();
        if pages == 0 || pages > available {
            return Err(Error::OutOfMemory {
                requested: pages,
                available,
            });
        }
        self.mapping = None;
        self.phys_to_virt.clear();
        let len = (pages * PAGE_SIZE) as usize;
        // SAFETY: anonymous private mapping, checked for MAP_FAILED below.
        let ptr = unsafe {
            libc::mmap(
                ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_POPULATE,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(Error::OutOfMemory {
                requested: pages,
                available,
            });
        }
        let mapping = Mapping {
            ptr: ptr.cast(),
            len,
        };
        let pagemap = File::open("/proc/self/pagemap")?;
        let mut phys = Vec::with_capacity(pages as usize);
        for i in 0..pages as usize {
            let virt = mapping.ptr as usize + i * PAGE_SIZE as usize;
            // SAFETY: inside the mapping; writing forces a private physical page.
            unsafe { ptr::write_volatile(virt as *mut u8, 1) };
            let p = translate(&pagemap, virt)?;
            self.phys_to_virt.insert(p, virt);
            phys.push(p);
        }
        self.mapping = Some(mapping);
        self.allocation = Allocation::from_pages(phys);
        Ok(self.allocation.clone())
    }

    fn allocation(&self) -> &Allocation {
        &self.allocation
    }

    fn available_pages(&self) -> u64 {
        available_bytes() / PAGE_SIZE
    }

    fn measure_pair(&mut self, a: PhysicalAddress, b: PhysicalAddress, rounds: u32) -> Result<f64> {
        let (va, vb) = (self.virt(a)?, self.virt(b)?);
        self.measurements += 1;
        let mut samples: Vec<f64> = (0..rounds.max(1))
            .map(|_| {
                let total: u64 = (0..ACCESSES_PER_ROUND)
                    // SAFETY: both addresses are inside the live mapping.
                    .map(|_| unsafe { time_pair(va, vb) })
                    .sum();
                total as f64 / ACCESSES_PER_ROUND as f64
            })
            .collect();
        samples.sort_by(f64::total_cmp);
        Ok(samples[samples.len() / 2])
    }

    fn measurement_count(&self) -> u64 {
        self.measurements
    }

    fn row_access(&mut self) -> Option<&mut dyn RowAccess> {
        Some(self)
    }
}

impl RowAccess for HwBackend {
    fn write(&mut self, addr: PhysicalAddress, data: &[u8]) -> Result<()> {
        for (i, &byte) in data.iter().enumerate() {
            let p = self.virt(PhysicalAddress(addr.0 + i as u64))?;
            // SAFETY: translated inside the live mapping.
            unsafe {
                ptr::write_volatile(p, byte);
                _mm_clflush(p);
            }
        }
        Ok(())
    }

    fn read(&mut self, addr: PhysicalAddress, len: usize) -> Result<Vec<u8>> {
        (0..len as u64)
            .map(|i| {
                let p = self.virt(PhysicalAddress(addr.0 + i))?;
                // SAFETY: translated inside the live mapping.
                Ok(unsafe {
                    _mm_clflush(p);
                    _mm_mfence();
                    ptr::read_volatile(p)
                })
            })
            .collect()
    }

    fn hammer_pair(&mut self, lo: PhysicalAddress, hi: PhysicalAddress, iterations: u64) -> Result<()> {
        let (a, b) = (self.virt(lo)?, self.virt(hi)?);
        for _ in 0..iterations {
            // SAFETY: both addresses are inside the live mapping.
            unsafe {
                ptr::read_volatile(a);
                ptr::read_volatile(b);
                _mm_clflush(a);
                _mm_clflush(b);
            }
        }
        Ok(())
    }
}
