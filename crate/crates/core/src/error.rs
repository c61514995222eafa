use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {source_name}: {message}")]
    Parse { source_name: String, message: String },
    #[error("incomplete system information: `{0}` not found in any source")]
    IncompleteInfo(&'static str),
    #[error("total bank count {0} is not a power of two")]
    NonPowerOfTwoBanks(u64),
    #[error("invalid DRAM configuration: {0}")]
    InvalidConfig(String),
    #[error("no row/column bit counts known for {chip} with {bank_bytes} bytes per bank; set row_bits/column_bits explicitly")]
    UnsupportedDensity { chip: String, bank_bytes: u64 },
    #[error("out of memory: requested {requested} pages, {available} available")]
    OutOfMemory { requested: u64, available: u64 },
    #[error("address {0:#x} is outside the allocation")]
    AddressOutsideAllocation(u64),
    #[error("latency histogram is not bimodal (separation {separation:.2}, need > 2.0)")]
    BimodalityNotFound { separation: f64 },
    #[error("calibration needs at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("no testable address pair for bit {0} within the allocation")]
    InsufficientAddressPairs(u32),
    #[error("no gap-free physical page run covers range mask {range_mask:#x}")]
    NoContiguousRange { range_mask: u64 },
    #[error("candidate bank bit set is empty")]
    EmptyCandidateBits,
    #[error("address pool of {pool} is smaller than 2 x {banks} banks")]
    PoolTooSmall { pool: usize, banks: u64 },
    #[error("partition stalled after {attempts} attempts: {piles} piles, coverage {coverage:.3}")]
    PartitionStalled {
        attempts: usize,
        piles: usize,
        coverage: f64,
    },
    #[error("{0} candidate bank bits exceed the limit of 24")]
    TooManyCandidateBits(usize),
    #[error("no {needed}-function subset numbers the piles bijectively")]
    NoValidBasis { needed: usize },
    #[error("only {piles} piles for {banks} banks")]
    UnderdeterminedPiles { piles: usize, banks: u64 },
    #[error("found {found} row bits, expected {expected}")]
    RowCountUnreachable { found: usize, expected: usize },
    #[error("found {found} column bits, expected {expected}")]
    ColumnCountUnreachable { found: usize, expected: usize },
    #[error("inconsistent bit counts: {0}")]
    InconsistentCounts(String),
    #[error("allocation contains no three adjacent rows in any bank")]
    NoTriplesAvailable,
    #[error("backend does not support {0}")]
    BackendUnsupported(&'static str),
    #[error("hardware backend: {0}")]
    Hardware(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(source_name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error class. Codes 1 and 2 are reserved for
    /// `verify` mismatches and usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. } => 10,
            Error::IncompleteInfo(_) => 11,
            Error::NonPowerOfTwoBanks(_) => 12,
            Error::InvalidConfig(_) => 13,
            Error::UnsupportedDensity { .. } => 14,
            Error::OutOfMemory { .. } => 20,
            Error::AddressOutsideAllocation(_) => 21,
            Error::Hardware(_) => 22,
            Error::BackendUnsupported(_) => 23,
            Error::BimodalityNotFound { .. } => 30,
            Error::InsufficientSamples { .. } => 31,
            Error::InsufficientAddressPairs(_) => 40,
            Error::NoContiguousRange { .. } => 50,
            Error::EmptyCandidateBits => 51,
            Error::PoolTooSmall { .. } => 52,
            Error::PartitionStalled { .. } => 53,
            Error::TooManyCandidateBits(_) => 54,
            Error::NoValidBasis { .. } => 55,
            Error::UnderdeterminedPiles { .. } => 56,
            Error::RowCountUnreachable { .. } => 60,
            Error::ColumnCountUnreachable { .. } => 61,
            Error::InconsistentCounts(_) => 62,
            Error::NoTriplesAvailable => 70,
            Error::Io(_) => 80,
        }
    }
}

/// Pipeline stage an error was raised in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    Calibration,
    Coarse,
    Selection,
    Partition,
    Functions,
    Fine,
    Assemble,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Setup => "setup",
            Stage::Calibration => "calibration",
            Stage::Coarse => "coarse",
            Stage::Selection => "selection",
            Stage::Partition => "partition",
            Stage::Functions => "functions",
            Stage::Fine => "fine",
            Stage::Assemble => "assemble",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {error}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub error: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn exit_codes_are_unique() {
        let all = [
            Error::parse("x", "y"),
            Error::IncompleteInfo("channels"),
            Error::NonPowerOfTwoBanks(3),
            Error::InvalidConfig(String::new()),
            Error::UnsupportedDensity {
                chip: String::new(),
                bank_bytes: 0,
            },
            Error::OutOfMemory {
                requested: 0,
                available: 0,
            },
            Error::AddressOutsideAllocation(0),
            Error::Hardware(String::new()),
            Error::BackendUnsupported("x"),
            Error::BimodalityNotFound { separation: 0.0 },
            Error::InsufficientSamples { needed: 0, got: 0 },
            Error::InsufficientAddressPairs(0),
            Error::NoContiguousRange { range_mask: 0 },
            Error::EmptyCandidateBits,
            Error::PoolTooSmall { pool: 0, banks: 0 },
            Error::PartitionStalled {
                attempts: 0,
                piles: 0,
                coverage: 0.0,
            },
            Error::TooManyCandidateBits(0),
            Error::NoValidBasis { needed: 0 },
            Error::UnderdeterminedPiles { piles: 0, banks: 0 },
            Error::RowCountUnreachable {
                found: 0,
                expected: 0,
            },
            Error::ColumnCountUnreachable {
                found: 0,
                expected: 0,
            },
            Error::InconsistentCounts(String::new()),
            Error::NoTriplesAvailable,
            Error::Io(std::io::Error::other("x")),
        ];
        let codes: HashSet<i32> = all.iter().map(Error::exit_code).collect();
        assert_eq!(codes.len(), all.len());
        assert!(!codes.contains(&0) && !codes.contains(&1) && !codes.contains(&2));
    }
}
