//! End-to-end orchestration: calibration, coarse classification, bank
//! functions, shared bits and assembly.

use std::collections::BTreeSet;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{MemoryBackend, PAGE_SIZE};
use crate::bankfns::{self, Partition, PartitionOptions};
use crate::coarse::{self, ProbeOptions};
use crate::error::{AtStage, Error, Stage, StageError};
use crate::fine;
use crate::knowledge::{consistency_warning, expected_bit_counts, DramConfig};
use crate::report::{
    AllocationSummary, FineSummary, FunctionSummary, PartitionSummary, RunReport, SelectionSummary,
    StageMeasurements,
};
use crate::timing;

pub const DEFAULT_SEED: u64 = 0x00d1_a65e_ed00;
/// 1 GiB worth of pages.
pub const DEFAULT_INITIAL_PAGES: u64 = 1 << 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOptions {
    pub seed: u64,
    pub votes: usize,
    pub rounds: u32,
    pub calibration_samples: usize,
    pub delta: f64,
    pub per_threshold: f64,
    pub max_function_bits: Option<usize>,
    pub confirm_votes: usize,
    pub max_attempts: Option<usize>,
    /// First allocation size; doubled (up to what the backend offers) when
    /// bits are untestable or no gap-free range exists.
    pub initial_pages: Option<u64>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            seed: DEFAULT_SEED,
            votes: 5,
            rounds: 10,
            calibration_samples: 1000,
            delta: 0.2,
            per_threshold: 0.85,
            max_function_bits: Some(8),
            confirm_votes: 9,
            max_attempts: None,
            initial_pages: None,
        }
    }
}

impl PipelineOptions {
    fn probe(&self) -> ProbeOptions {
        ProbeOptions {
            votes: self.votes,
            rounds: self.rounds,
        }
    }

    fn partition(&self) -> PartitionOptions {
        PartitionOptions {
            delta: self.delta,
            per_threshold: self.per_threshold,
            max_attempts: self.max_attempts,
            confirm_votes: self.confirm_votes,
            rounds: self.rounds,
        }
    }
}

/// Everything a run produced, including the piles (which the report only summarizes).
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub partition: Option<Partition>,
}

struct Meter {
    last: u64,
    started: Instant,
    stages: Vec<StageMeasurements>,
}

impl Meter {
    fn new(backend: &dyn MemoryBackend) -> Self {
        Meter {
            last: backend.measurement_count(),
            started: Instant::now(),
            stages: Vec::new(),
        }
    }

    fn lap(&mut self, backend: &dyn MemoryBackend, stage: Stage) {
        let now = backend.measurement_count();
        info!("{stage}: {} measurements, {:.2?}", now - self.last, self.started.elapsed());
        match self.stages.last_mut() {
            Some(s) if s.stage == stage => s.measurements += now - self.last,
            _ => self.stages.push(StageMeasurements {
                stage,
                measurements: now - self.last,
            }),
        }
        self.last = now;
        self.started = Instant::now();
    }
}

fn grow(backend: &mut dyn MemoryBackend, pages: &mut u64, retries: &mut u32, why: &Error) -> bool {
    let cap = backend.available_pages();
    if *pages >= cap {
        return false;
    }
    *pages = (*pages * 2).min(cap);
    *retries += 1;
    info!("{why}; retrying with {pages} pages", pages = *pages);
    true
}

pub fn run(backend: &mut dyn MemoryBackend, cfg: &DramConfig, opts: &PipelineOptions) -> Result<RunReport, StageError> {
    run_detailed(backend, cfg, opts).map(|o| o.report)
}

pub fn run_detailed(
    backend: &mut dyn MemoryBackend,
    cfg: &DramConfig,
    opts: &PipelineOptions,
) -> Result<RunOutcome, StageError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut meter = Meter::new(backend);
    let mut warnings = Vec::new();

    cfg.validate().at(Stage::Setup)?;
    let expected = expected_bit_counts(cfg).at(Stage::Setup)?;
    warnings.extend(consistency_warning(cfg, &expected));
    let banks = cfg.total_banks();
    let tested = (0, cfg.address_bits() - 1);
    let available = backend.available_pages();
    let mut pages = opts.initial_pages.unwrap_or(DEFAULT_INITIAL_PAGES).min(available).max(1);
    let mut retries = 0;
    backend.allocate(pages).at(Stage::Setup)?;

    let calibration =
        timing::calibrate(backend, opts.calibration_samples, opts.rounds, &mut rng).at(Stage::Calibration)?;
    meter.lap(backend, Stage::Calibration);

    let coarse = loop {
        match coarse::classify_bits(backend, &calibration, tested, &opts.probe(), &mut rng) {
            Err(e @ Error::InsufficientAddressPairs(_)) if grow(backend, &mut pages, &mut retries, &e) => {
                backend.allocate(pages).at(Stage::Setup)?;
            }
            other => break other.at(Stage::Coarse)?,
        }
    };
    meter.lap(backend, Stage::Coarse);

    let (functions, selection, partition, function_summary) = if banks == 1 {
        (Vec::new(), None, None, FunctionSummary::default())
    } else {
        let selection = loop {
            match bankfns::select_addresses(backend.allocation(), &coarse.bank_candidate_bits) {
                Err(e @ Error::NoContiguousRange { .. }) if grow(backend, &mut pages, &mut retries, &e) => {
                    backend.allocate(pages).at(Stage::Setup)?;
                }
                other => break other.at(Stage::Selection)?,
            }
        };
        let partition = bankfns::partition(
            &selection.pool,
            backend,
            &calibration,
            banks,
            &opts.partition(),
            &mut rng,
        )
        .at(Stage::Partition)?;
        meter.lap(backend, Stage::Partition);
        let detection = bankfns::detect_functions(
            &partition.piles,
            &coarse.bank_candidate_bits,
            banks,
            opts.max_function_bits,
        )
        .at(Stage::Functions)?;
        let summary = FunctionSummary {
            consistent_masks: detection.consistent_masks,
            discarded_redundant: detection.discarded_redundant.clone(),
            alternatives: detection.alternatives,
            outliers: detection.outliers,
            bijective: bankfns::numbers_bijectively(&detection.functions, &partition.piles),
        };
        (
            detection.functions,
            Some(SelectionSummary::from(&selection)),
            Some(partition),
            summary,
        )
    };

    let shared_rows = fine::resolve_shared_row_bits(
        backend,
        &calibration,
        &functions,
        &coarse,
        expected.row_bits as usize,
        &opts.probe(),
        &mut rng,
    )
    .at(Stage::Fine)?;
    meter.lap(backend, Stage::Fine);
    let rows: BTreeSet<u32> = coarse.row_bits.union(&shared_rows).copied().collect();
    let shared_columns =
        fine::resolve_shared_column_bits(&functions, &rows, &coarse.column_bits, expected.column_bits as usize)
            .at(Stage::Fine)?;
    let assembled =
        fine::assemble(&functions, &coarse, &shared_rows, &shared_columns, &expected).at(Stage::Assemble)?;

    let report = RunReport {
        seed: opts.seed,
        config: cfg.clone(),
        expected,
        options: opts.clone(),
        allocation: AllocationSummary {
            pages: backend.allocation().page_count(),
            runs: backend.allocation().runs().len(),
            bytes: backend.allocation().page_count() * PAGE_SIZE,
            retries,
        },
        calibration,
        coarse,
        selection,
        partition: partition
            .as_ref()
            .map(|p| PartitionSummary::new(p, banks, opts.delta)),
        functions: function_summary,
        fine: FineSummary {
            shared_row_bits: shared_rows,
            shared_column_bits: shared_columns,
            column_exclusion_bit: fine::column_exclusion_bit(&functions),
        },
        mapping: assembled.mapping,
        provenance: assembled.provenance,
        measurements: meter.stages,
        warnings,
    };
    Ok(RunOutcome { report, partition })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::sim::{LatencyModel, SimBackend, SimLayout};
    use crate::fixtures::FIXTURES;

    fn recover(n: usize, model: LatencyModel, seed: u64) -> Result<RunOutcome, StageError> {
        let f = &FIXTURES[n - 1];
        let cfg = f.dram_config().unwrap();
        let mut b = SimBackend::new(f.truth().unwrap(), cfg.total_memory, model, &SimLayout::contiguous(), seed).unwrap();
        let opts = PipelineOptions {
            seed,
            ..PipelineOptions::default()
        };
        run_detailed(&mut b, &cfg, &opts)
    }

    #[test]
    fn recovers_every_fixture() {
        for f in &FIXTURES {
            let r = recover(f.number as usize, LatencyModel::default(), 1)
                .unwrap_or_else(|e| panic!("{}: {e}", f.name))
                .report;
            let truth = f.truth().unwrap();
            assert!(r.mapping.functions_equivalent(&truth), "{}", f.name);
            assert_eq!(r.mapping.row_bits, truth.row_bits, "{}", f.name);
            assert_eq!(r.mapping.column_bits, truth.column_bits, "{}", f.name);
            assert!(r.functions.bijective, "{}", f.name);
            assert_eq!(r.functions.outliers, 0, "{}", f.name);
        }
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let f = &FIXTURES[3];
        let mut cfg = f.dram_config().unwrap();
        cfg.ranks_per_dimm = 2; // twice the banks the controller really has
        let mut b = SimBackend::new(f.truth().unwrap(), cfg.total_memory, LatencyModel::default(), &SimLayout::contiguous(), 0)
            .unwrap();
        let err = run(&mut b, &cfg, &PipelineOptions::default()).unwrap_err();
        assert!(matches!(err.stage, Stage::Partition | Stage::Functions | Stage::Fine), "{err}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(6))]

        #[test]
        fn report_json_round_trips(seed in 0u64..1000, flip in 0.0f64..0.03) {
            let f = &FIXTURES[3];
            let cfg = f.dram_config().unwrap();
            let model = LatencyModel { flip_probability: flip, ..LatencyModel::default() };
            let mut b = SimBackend::new(f.truth().unwrap(), cfg.total_memory, model, &SimLayout::fragmented(0.01), seed).unwrap();
            let opts = PipelineOptions { seed, ..PipelineOptions::default() };
            if let Ok(r) = run(&mut b, &cfg, &opts) {
                proptest::prop_assert_eq!(RunReport::from_json(&r.to_json()).unwrap(), r);
            }
        }
    }
}
