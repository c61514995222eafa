//! Run reports: a JSON document for machines and a one-row table in the
//! reference-table layout for people.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bankfns::{Partition, SelectionResult};
use crate::coarse::BitClassification;
use crate::error::{Error, Result, Stage};
use crate::fine::BitOrigin;
use crate::knowledge::{DramConfig, ExpectedBitCounts};
use crate::mapping::{format_bit_list, AddressMapping, BankFunction};
use crate::pipeline::PipelineOptions;
use crate::timing::LatencyThreshold;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    pub pages: u64,
    pub runs: usize,
    pub bytes: u64,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub b_min: u32,
    pub b_max: u32,
    pub range_mask: u64,
    pub miss_mask: u64,
    pub page_range: (u64, u64),
    pub pool_size: usize,
}

impl From<&SelectionResult> for SelectionSummary {
    fn from(s: &SelectionResult) -> Self {
        SelectionSummary {
            b_min: s.b_min,
            b_max: s.b_max,
            range_mask: s.range_mask,
            miss_mask: s.miss_mask,
            page_range: s.page_range,
            pool_size: s.pool.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub pool_size: usize,
    /// Accepted pile sizes, representative included, in acceptance order.
    pub pile_sizes: Vec<usize>,
    pub size_band: (f64, f64),
    pub coverage: f64,
    pub attempts: usize,
    pub rejected: usize,
}

impl PartitionSummary {
    pub fn new(p: &Partition, banks: u64, delta: f64) -> Self {
        PartitionSummary {
            pool_size: p.pool_size,
            pile_sizes: p.piles.iter().map(|pile| pile.size()).collect(),
            size_band: Partition::size_band(p.pool_size, banks, delta),
            coverage: p.coverage,
            attempts: p.attempts,
            rejected: p.rejected,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSummary {
    pub consistent_masks: usize,
    pub discarded_redundant: Vec<BankFunction>,
    pub alternatives: usize,
    pub outliers: usize,
    pub bijective: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FineSummary {
    pub shared_row_bits: BTreeSet<u32>,
    pub shared_column_bits: BTreeSet<u32>,
    pub column_exclusion_bit: Option<u32>,
}

/// Measurements issued per stage. Wall-clock time goes to the log instead so
/// that reports stay reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMeasurements {
    pub stage: Stage,
    pub measurements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: DramConfig,
    pub expected: ExpectedBitCounts,
    pub options: PipelineOptions,
    pub allocation: AllocationSummary,
    pub calibration: LatencyThreshold,
    pub coarse: BitClassification,
    pub selection: Option<SelectionSummary>,
    pub partition: Option<PartitionSummary>,
    pub functions: FunctionSummary,
    pub fine: FineSummary,
    pub mapping: AddressMapping,
    pub provenance: Vec<(u32, BitOrigin)>,
    pub measurements: Vec<StageMeasurements>,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn from_json(text: &str) -> Result<RunReport> {
        serde_json::from_str(text).map_err(|e| Error::parse("report", e.to_string()))
    }

    /// `No. | Type | Geometry | Memory | Functions | Row Bits | Column Bits`.
    pub fn table(&self, label: &str) -> String {
        let c = &self.config;
        let header = ["No.", "Type", "Geometry", "Memory", "Bank Address Functions", "Row Bits", "Column Bits"];
        let row = [
            label.to_string(),
            c.chip_type.to_string(),
            format!("{},{},{},{}", c.channels, c.dimms_per_channel, c.ranks_per_dimm, c.banks_per_rank),
            human_size(c.total_memory),
            format_functions(&self.mapping.bank_functions),
            format_bit_list(&self.mapping.row_bits),
            format_bit_list(&self.mapping.column_bits),
        ];
        let widths: Vec<usize> = header.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let mut out = String::new();
        for cells in [header.map(String::from), row] {
            let line: Vec<String> = cells.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            writeln!(out, "{}", line.join(" | ").trim_end()).unwrap();
        }
        out
    }
}

pub fn format_functions(functions: &[BankFunction]) -> String {
    functions
        .iter()
        .map(|f| {
            let bits: Vec<String> = f.bits().iter().map(u32::to_string).collect();
            format!("({})", bits.join(", "))
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn human_size(bytes: u64) -> String {
    if bytes.is_multiple_of(1 << 30) {
        format!("{}G", bytes >> 30)
    } else {
        format!("{}M", bytes >> 20)
    }
}
