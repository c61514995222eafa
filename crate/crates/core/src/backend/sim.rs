//! Simulated memory controller with an injected ground-truth mapping.
//!
//! Row buffers are not simulated statefully: a pair is drawn from the
//! conflict distribution iff it is same-bank-different-row under the ground
//! truth, optionally with its class flipped to model misclassification.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Allocation, MemoryBackend, PAGE_SIZE};
use crate::error::{Error, Result};
use crate::mapping::{GroundTruthMapping, PhysicalAddress};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub fast_cycles: f64,
    pub conflict_cycles: f64,
    pub noise_stddev: f64,
    /// Probability that a measurement is drawn from the wrong class.
    pub flip_probability: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel {
            fast_cycles: 200.0,
            conflict_cycles: 400.0,
            noise_stddev: 10.0,
            flip_probability: 0.0,
        }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::InvalidConfig(format!(
                "flip probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        if self.noise_stddev.is_nan() || self.noise_stddev < 0.0 || !self.fast_cycles.is_finite() || !self.conflict_cycles.is_finite() {
            return Err(Error::InvalidConfig("latency model parameters must be finite".into()));
        }
        Ok(())
    }

    /// Conflict and fast distributions do not overlap within 4 sigma.
    pub fn is_separable(&self) -> bool {
        self.flip_probability == 0.0 && self.conflict_cycles > self.fast_cycles + 4.0 * self.noise_stddev
    }
}

/// Which physical pages the simulated OS hands out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimLayout {
    /// Granularity, in pages, of randomly withheld runs.
    pub run_pages: u64,
    /// Probability that a run is withheld (already in use by someone else).
    pub hole_probability: f64,
    /// Page indices that are never handed out.
    pub holes: BTreeSet<u64>,
}

impl SimLayout {
    pub fn contiguous() -> Self {
        SimLayout {
            run_pages: 512,
            hole_probability: 0.0,
            holes: BTreeSet::new(),
        }
    }

    /// 2 MiB runs, each withheld with probability `hole_probability`.
    pub fn fragmented(hole_probability: f64) -> Self {
        SimLayout {
            hole_probability,
            ..Self::contiguous()
        }
    }

    pub fn with_holes(mut self, pages: impl IntoIterator<Item = u64>) -> Self {
        self.holes.extend(pages);
        self
    }

    fn available(&self, total_memory: u64, seed: u64) -> Allocation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a70_u64);
        let total_pages = total_memory / PAGE_SIZE;
        let run = self.run_pages.max(1);
        let mut runs = Vec::new();
        let mut start = 0;
        while start < total_pages {
            let end = (start + run).min(total_pages);
            let withheld = self.hole_probability > 0.0 && rng.random_bool(self.hole_probability.min(1.0));
            if !withheld {
                let mut s = start;
                for &h in self.holes.range(start..end) {
                    runs.push((s * PAGE_SIZE, h * PAGE_SIZE));
                    s = h + 1;
                }
                runs.push((s * PAGE_SIZE, end * PAGE_SIZE));
            }
            start = end;
        }
        Allocation::from_runs(runs)
    }
}

pub struct SimBackend {
    truth: GroundTruthMapping,
    model: LatencyModel,
    available: Allocation,
    allocation: Allocation,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    row_mask: u64,
    function_masks: Vec<u64>,
    measurements: u64,
}

impl SimBackend {
    pub fn new(
        truth: GroundTruthMapping,
        total_memory: u64,
        model: LatencyModel,
        layout: &SimLayout,
        seed: u64,
    ) -> Result<Self> {
        model.validate()?;
        if let Some(top) = truth.highest_bit() {
            if top >= 64 || (1u128 << top) >= total_memory as u128 {
                return Err(Error::InvalidConfig(format!(
                    "ground truth uses bit {top}, beyond {total_memory} bytes of memory"
                )));
            }
        }
        let noise = (model.noise_stddev > 0.0)
            .then(|| Normal::new(0.0, model.noise_stddev).expect("finite stddev"));
        Ok(SimBackend {
            row_mask: truth.row_mask(),
            function_masks: truth.bank_functions.iter().map(|f| f.mask()).collect(),
            truth,
            model,
            available: layout.available(total_memory, seed),
            allocation: Allocation::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise,
            measurements: 0,
        })
    }

    pub fn truth(&self) -> &GroundTruthMapping {
        &self.truth
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    fn sbdr(&self, a: PhysicalAddress, b: PhysicalAddress) -> bool {
        let diff = a.0 ^ b.0;
        diff & self.row_mask != 0 && self.function_masks.iter().all(|m| (diff & m).count_ones().is_multiple_of(2))
    }
}

impl MemoryBackend for SimBackend {
    fn allocate(&mut self, pages: u64) -> Result<Allocation> {
        let available = self.available.page_count();
        if pages == 0 || pages > available {
            return Err(Error::OutOfMemory {
                requested: pages,
                available,
            });
        }
        self.allocation = self.available.truncated(pages);
        Ok(self.allocation.clone())
    }

    fn allocation(&self) -> &Allocation {
        &self.allocation
    }

    fn available_pages(&self) -> u64 {
        self.available.page_count()
    }

    fn measure_pair(&mut self, a: PhysicalAddress, b: PhysicalAddress, rounds: u32) -> Result<f64> {
        for addr in [a, b] {
            if !self.allocation.contains(addr) {
                return Err(Error::AddressOutsideAllocation(addr.0));
            }
        }
        self.measurements += 1;
        let mut conflict = self.sbdr(a, b);
        if self.model.flip_probability > 0.0 && self.rng.random_bool(self.model.flip_probability) {
            conflict = !conflict;
        }
        let mean = if conflict {
            self.model.conflict_cycles
        } else {
            self.model.fast_cycles
        };
        let Some(noise) = self.noise else {
            return Ok(mean);
        };
        let mut draws: Vec<f64> = (0..rounds.max(1)).map(|_| mean + noise.sample(&mut self.rng)).collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len();
        Ok(if n % 2 == 1 {
            draws[n / 2]
        } else {
            (draws[n / 2 - 1] + draws[n / 2]) / 2.0
        })
    }

    fn measurement_count(&self) -> u64 {
        self.measurements
    }
}
