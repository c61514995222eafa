//! Conflict/fast threshold calibration and the SBDR classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::MemoryBackend;
use crate::error::{Error, Result};
use crate::mapping::PhysicalAddress;

pub const MIN_CALIBRATION_SAMPLES: usize = 200;
pub const MIN_SEPARATION: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyThreshold {
    pub cutoff: f64,
    pub fast_mean: f64,
    pub conflict_mean: f64,
    /// Width of the empty band between the clusters over the pooled stddev.
    pub separation: f64,
    pub pooled_stddev: f64,
    pub fast_samples: usize,
    pub conflict_samples: usize,
}

impl LatencyThreshold {
    /// A threshold with no calibration data behind it, for tests and replays.
    pub fn fixed(fast_mean: f64, conflict_mean: f64, pooled_stddev: f64) -> Self {
        LatencyThreshold {
            cutoff: (fast_mean + conflict_mean) / 2.0,
            fast_mean,
            conflict_mean,
            separation: f64::MAX,
            pooled_stddev,
            fast_samples: 0,
            conflict_samples: 0,
        }
    }
}

/// Splits 1-D samples at the widest gap between consecutive sorted values.
pub fn two_cluster_split(samples: &[f64]) -> Result<LatencyThreshold> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let no_signal = Error::BimodalityNotFound { separation: 0.0 };
    if sorted.len() < 2 {
        return Err(no_signal);
    }
    let (split, gap) = sorted
        .windows(2)
        .enumerate()
        .map(|(i, w)| (i + 1, w[1] - w[0]))
        .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    if gap <= 0.0 {
        return Err(no_signal);
    }
    let (fast, conflict) = sorted.split_at(split);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let ss = |xs: &[f64], m: f64| xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    let (fast_mean, conflict_mean) = (mean(fast), mean(conflict));
    let dof = (sorted.len() as f64 - 2.0).max(1.0);
    let pooled = ((ss(fast, fast_mean) + ss(conflict, conflict_mean)) / dof).sqrt();
    let separation = if pooled > 0.0 { gap / pooled } else { f64::MAX };
    if separation <= MIN_SEPARATION {
        return Err(Error::BimodalityNotFound { separation });
    }
    Ok(LatencyThreshold {
        cutoff: (fast_mean + conflict_mean) / 2.0,
        fast_mean,
        conflict_mean,
        separation,
        pooled_stddev: pooled,
        fast_samples: fast.len(),
        conflict_samples: conflict.len(),
    })
}

/// Measures `samples` random address pairs from the current allocation and
/// splits the latency histogram into a fast and a conflict cluster.
pub fn calibrate<R: Rng + ?Sized>(
    backend: &mut dyn MemoryBackend,
    samples: usize,
    rounds: u32,
    rng: &mut R,
) -> Result<LatencyThreshold> {
    if samples < MIN_CALIBRATION_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_CALIBRATION_SAMPLES,
            got: samples,
        });
    }
    let alloc = backend.allocation().clone();
    let mut latencies = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (Some(a), Some(b)) = (alloc.random_address(rng), alloc.random_address(rng)) else {
            return Err(Error::OutOfMemory {
                requested: 1,
                available: 0,
            });
        };
        latencies.push(backend.measure_pair(a, b, rounds)?);
    }
    two_cluster_split(&latencies)
}

/// Same-bank-different-row test. A first measurement within half a pooled
/// stddev of the cutoff is settled by a majority of three.
pub fn is_sbdr(
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    a: PhysicalAddress,
    b: PhysicalAddress,
    rounds: u32,
) -> Result<bool> {
    let first = backend.measure_pair(a, b, rounds)?;
    if (first - threshold.cutoff).abs() > 0.5 * threshold.pooled_stddev {
        return Ok(first > threshold.cutoff);
    }
    let mut high = usize::from(first > threshold.cutoff);
    for _ in 0..2 {
        if backend.measure_pair(a, b, rounds)? > threshold.cutoff {
            high += 1;
        }
    }
    Ok(high >= 2)
}

/// Majority over independent `is_sbdr` decisions on distinct pairs.
pub fn majority_sbdr(
    backend: &mut dyn MemoryBackend,
    threshold: &LatencyThreshold,
    pairs: &[(PhysicalAddress, PhysicalAddress)],
    rounds: u32,
) -> Result<bool> {
    let mut yes = 0;
    for &(a, b) in pairs {
        if is_sbdr(backend, threshold, a, b, rounds)? {
            yes += 1;
        }
    }
    Ok(2 * yes > pairs.len())
}
