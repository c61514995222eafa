//! The nine reference machine settings, embedded as ground-truth mapping and
//! configuration files.

use crate::error::Result;
use crate::knowledge::{parse_system_info, DramConfig};
use crate::mapping::AddressMapping;

#[derive(Debug, Clone, Copy)]
pub struct Fixture {
    pub number: u32,
    pub name: &'static str,
    pub mapping: &'static str,
    pub config: &'static str,
}

macro_rules! fixture {
    ($n:literal) => {
        Fixture {
            number: $n,
            name: concat!("no", $n),
            mapping: include_str!(concat!("../fixtures/no", $n, ".map")),
            config: include_str!(concat!("../fixtures/no", $n, ".cfg")),
        }
    };
}

pub const FIXTURES: [Fixture; 9] = [
    fixture!(1),
    fixture!(2),
    fixture!(3),
    fixture!(4),
    fixture!(5),
    fixture!(6),
    fixture!(7),
    fixture!(8),
    fixture!(9),
];

/// `dmidecode -t memory` and `decode-dimms` captures of a two-channel,
/// dual-rank DDR4 machine with 16 GiB.
pub const DMIDECODE_SAMPLE: &str = include_str!("../fixtures/no6.dmidecode");
pub const DECODE_DIMMS_SAMPLE: &str = include_str!("../fixtures/no6.decode-dimms");

impl Fixture {
    pub fn truth(&self) -> Result<AddressMapping> {
        AddressMapping::parse(self.mapping)
    }

    pub fn dram_config(&self) -> Result<DramConfig> {
        parse_system_info(self.config, None)
    }
}

/// Looks a fixture up by `no4`, `4` or `no4.map`.
pub fn find(name: &str) -> Option<&'static Fixture> {
    let key = name.trim_end_matches(".map").trim_end_matches(".cfg");
    let key = key.rsplit('/').next().unwrap_or(key);
    let key = key.strip_prefix("no").unwrap_or(key);
    FIXTURES.iter().find(|f| f.number.to_string() == key)
}
