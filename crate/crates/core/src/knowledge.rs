//! Domain knowledge consumed by the pipeline: DRAM geometry, per-chip bit
//! counts and system-information ingestion.
//!
//! Three input dialects are recognized by [`SystemInfo::parse`]:
//!
//! * the structured `key = value` config format written by [`render_config`];
//! * `dmidecode -t memory` output (dmidecode 3.x layout, `ChannelX-DIMMn` locators);
//! * `decode-dimms` output (i2c-tools 4.x layout with a
//!   `Banks x Rows x Columns x Bits` line).
//!
//! Anything else is a parse error.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChipType {
    #[serde(rename = "DDR3")]
    Ddr3,
    #[serde(rename = "DDR4")]
    Ddr4,
}

impl ChipType {
    /// Banks per rank in the JEDEC base configuration.
    pub fn default_banks_per_rank(self) -> u64 {
        match self {
            ChipType::Ddr3 => 8,
            ChipType::Ddr4 => 16,
        }
    }
}

impl fmt::Display for ChipType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChipType::Ddr3 => "DDR3",
            ChipType::Ddr4 => "DDR4",
        })
    }
}

impl FromStr for ChipType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_uppercase();
        if s.starts_with("DDR3") {
            Ok(ChipType::Ddr3)
        } else if s.starts_with("DDR4") {
            Ok(ChipType::Ddr4)
        } else {
            Err(Error::parse("chip_type", format!("unsupported chip type `{s}`")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DramConfig {
    pub channels: u64,
    pub dimms_per_channel: u64,
    pub ranks_per_dimm: u64,
    pub banks_per_rank: u64,
    pub chip_type: ChipType,
    pub total_memory: u64,
    pub ecc: bool,
    /// Explicit row-bit count, overriding the density table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_bits: Option<u32>,
    /// Explicit column-bit count, overriding the density table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_bits: Option<u32>,
}

impl DramConfig {
    pub fn new(
        (channels, dimms_per_channel, ranks_per_dimm, banks_per_rank): (u64, u64, u64, u64),
        chip_type: ChipType,
        total_memory: u64,
    ) -> Result<Self> {
        let cfg = DramConfig {
            channels,
            dimms_per_channel,
            ranks_per_dimm,
            banks_per_rank,
            chip_type,
            total_memory,
            ecc: false,
            row_bits: None,
            column_bits: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("channels", self.channels),
            ("dimms_per_channel", self.dimms_per_channel),
            ("ranks_per_dimm", self.ranks_per_dimm),
            ("banks_per_rank", self.banks_per_rank),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if !self.total_banks().is_power_of_two() {
            return Err(Error::NonPowerOfTwoBanks(self.total_banks()));
        }
        for (name, n) in counts {
            if !n.is_power_of_two() {
                return Err(Error::InvalidConfig(format!("{name} = {n} is not a power of two")));
            }
        }
        if self.total_memory == 0 || !self.total_memory.is_multiple_of(4096) {
            return Err(Error::InvalidConfig(format!(
                "total_memory {} is not a positive multiple of the page size",
                self.total_memory
            )));
        }
        Ok(())
    }

    pub fn total_banks(&self) -> u64 {
        total_banks(self)
    }

    /// Highest physical-address bit plus one, i.e. ceil(log2(total_memory)).
    pub fn address_bits(&self) -> u32 {
        64 - (self.total_memory - 1).leading_zeros()
    }
}

pub fn total_banks(cfg: &DramConfig) -> u64 {
    cfg.channels * cfg.dimms_per_channel * cfg.ranks_per_dimm * cfg.banks_per_rank
}

pub fn expected_function_count(cfg: &DramConfig) -> Result<u32> {
    let banks = total_banks(cfg);
    if !banks.is_power_of_two() {
        return Err(Error::NonPowerOfTwoBanks(banks));
    }
    Ok(banks.trailing_zeros())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedBitCounts {
    pub bank_bits: u32,
    pub row_bits: u32,
    pub column_bits: u32,
}

/// (chip type, log2 bytes per bank) -> (row bits, column bits). Every known
/// configuration decodes an 8 KiB row (13 column bits including the bus offset).
const DENSITY_TABLE: &[(ChipType, u32, u32, u32)] = &[
    (ChipType::Ddr3, 27, 14, 13),
    (ChipType::Ddr3, 28, 15, 13),
    (ChipType::Ddr3, 29, 16, 13),
    (ChipType::Ddr3, 30, 17, 13),
    (ChipType::Ddr4, 27, 14, 13),
    (ChipType::Ddr4, 28, 15, 13),
    (ChipType::Ddr4, 29, 16, 13),
    (ChipType::Ddr4, 30, 17, 13),
    (ChipType::Ddr4, 31, 18, 13),
];

pub fn expected_bit_counts(cfg: &DramConfig) -> Result<ExpectedBitCounts> {
    let bank_bits = expected_function_count(cfg)?;
    let bank_bytes = cfg.total_memory / cfg.total_banks();
    let looked_up = bank_bytes
        .is_power_of_two()
        .then(|| bank_bytes.trailing_zeros())
        .and_then(|log| {
            DENSITY_TABLE
                .iter()
                .find(|(chip, l, _, _)| *chip == cfg.chip_type && *l == log)
                .map(|&(_, _, r, c)| (r, c))
        });
    let (row_bits, column_bits) = match (cfg.row_bits, cfg.column_bits, looked_up) {
        (Some(r), Some(c), _) => (r, c),
        (r, c, Some((tr, tc))) => (r.unwrap_or(tr), c.unwrap_or(tc)),
        _ => {
            return Err(Error::UnsupportedDensity {
                chip: cfg.chip_type.to_string(),
                bank_bytes,
            })
        }
    };
    Ok(ExpectedBitCounts {
        bank_bits,
        row_bits,
        column_bits,
    })
}

/// Advisory check that bank + row + column bits decode the whole memory. The
/// bus width is not known independently, so a mismatch is only a warning.
pub fn consistency_warning(cfg: &DramConfig, counts: &ExpectedBitCounts) -> Option<String> {
    let decoded = counts.bank_bits + counts.row_bits + counts.column_bits;
    let needed = cfg.address_bits();
    (decoded != needed).then(|| {
        let msg = format!(
            "bank ({}) + row ({}) + column ({}) bits = {decoded}, but {} bytes need {needed} address bits",
            counts.bank_bits, counts.row_bits, counts.column_bits, cfg.total_memory
        );
        warn!("{msg}");
        msg
    })
}

/// Partially known system information, merged from several sources.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SystemInfo {
    pub channels: Option<u64>,
    pub dimms_per_channel: Option<u64>,
    pub ranks_per_dimm: Option<u64>,
    pub banks_per_rank: Option<u64>,
    pub chip_type: Option<ChipType>,
    pub total_memory: Option<u64>,
    pub ecc: Option<bool>,
    pub row_bits: Option<u32>,
    pub column_bits: Option<u32>,
}

impl SystemInfo {
    pub fn parse(text: &str) -> Result<SystemInfo> {
        if text.trim().is_empty() {
            Ok(SystemInfo::default())
        } else if text.contains("Memory Device") {
            parse_dmidecode(text)
        } else if text.contains("Fundamental Memory type") {
            parse_decode_dimms(text)
        } else {
            parse_structured(text)
        }
    }

    /// Fills fields missing from `self` with those of `other`.
    pub fn or(self, other: &SystemInfo) -> SystemInfo {
        SystemInfo {
            channels: self.channels.or(other.channels),
            dimms_per_channel: self.dimms_per_channel.or(other.dimms_per_channel),
            ranks_per_dimm: self.ranks_per_dimm.or(other.ranks_per_dimm),
            banks_per_rank: self.banks_per_rank.or(other.banks_per_rank),
            chip_type: self.chip_type.or(other.chip_type),
            total_memory: self.total_memory.or(other.total_memory),
            ecc: self.ecc.or(other.ecc),
            row_bits: self.row_bits.or(other.row_bits),
            column_bits: self.column_bits.or(other.column_bits),
        }
    }

    pub fn into_config(self) -> Result<DramConfig> {
        let chip_type = self.chip_type.ok_or(Error::IncompleteInfo("chip_type"))?;
        let cfg = DramConfig {
            channels: self.channels.ok_or(Error::IncompleteInfo("channels"))?,
            dimms_per_channel: self.dimms_per_channel.ok_or(Error::IncompleteInfo("dimms_per_channel"))?,
            ranks_per_dimm: self.ranks_per_dimm.ok_or(Error::IncompleteInfo("ranks_per_dimm"))?,
            banks_per_rank: self
                .banks_per_rank
                .unwrap_or_else(|| chip_type.default_banks_per_rank()),
            chip_type,
            total_memory: self.total_memory.ok_or(Error::IncompleteInfo("total_memory_bytes"))?,
            ecc: self.ecc.unwrap_or(false),
            row_bits: self.row_bits,
            column_bits: self.column_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl From<&DramConfig> for SystemInfo {
    fn from(cfg: &DramConfig) -> Self {
        SystemInfo {
            channels: Some(cfg.channels),
            dimms_per_channel: Some(cfg.dimms_per_channel),
            ranks_per_dimm: Some(cfg.ranks_per_dimm),
            banks_per_rank: Some(cfg.banks_per_rank),
            chip_type: Some(cfg.chip_type),
            total_memory: Some(cfg.total_memory),
            ecc: Some(cfg.ecc),
            row_bits: cfg.row_bits,
            column_bits: cfg.column_bits,
        }
    }
}

/// Parses tool output (or a structured config) into a full configuration.
/// Fields the text lacks are taken from `fallback`, typically a config file.
pub fn parse_system_info(text: &str, fallback: Option<&SystemInfo>) -> Result<DramConfig> {
    let info = SystemInfo::parse(text)?;
    match fallback {
        Some(f) => info.or(f).into_config(),
        None => info.into_config(),
    }
}

pub fn render_config(cfg: &DramConfig) -> String {
    let mut out = format!(
        "channels = {}\ndimms_per_channel = {}\nranks_per_dimm = {}\nbanks_per_rank = {}\nchip_type = {}\ntotal_memory_bytes = {}\necc = {}\n",
        cfg.channels,
        cfg.dimms_per_channel,
        cfg.ranks_per_dimm,
        cfg.banks_per_rank,
        cfg.chip_type,
        cfg.total_memory,
        cfg.ecc
    );
    if let Some(r) = cfg.row_bits {
        out.push_str(&format!("row_bits = {r}\n"));
    }
    if let Some(c) = cfg.column_bits {
        out.push_str(&format!("column_bits = {c}\n"));
    }
    out
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .replace('_', "")
        .parse()
        .map_err(|_| Error::parse("config", format!("bad value `{value}` for `{key}`")))
}

fn parse_structured(text: &str) -> Result<SystemInfo> {
    let mut info = SystemInfo::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse("config", format!("line {}: unrecognized layout `{line}`", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "channels" => info.channels = Some(parse_num(key, value)?),
            "dimms_per_channel" => info.dimms_per_channel = Some(parse_num(key, value)?),
            "ranks_per_dimm" => info.ranks_per_dimm = Some(parse_num(key, value)?),
            "banks_per_rank" => info.banks_per_rank = Some(parse_num(key, value)?),
            "chip_type" => info.chip_type = Some(value.parse()?),
            "total_memory_bytes" => info.total_memory = Some(parse_num(key, value)?),
            "ecc" => info.ecc = Some(parse_num(key, value)?),
            "row_bits" => info.row_bits = Some(parse_num(key, value)?),
            "column_bits" => info.column_bits = Some(parse_num(key, value)?),
            other => return Err(Error::parse("config", format!("unknown key `{other}`"))),
        }
    }
    Ok(info)
}

/// `8192 MB`, `8 GB`, `16 GiB` -> bytes.
fn parse_size(value: &str) -> Option<u64> {
    let mut parts = value.split_whitespace();
    let n: u64 = parts.next()?.parse().ok()?;
    let unit = match parts.next()?.to_ascii_uppercase().as_str() {
        "KB" | "KIB" => 1 << 10,
        "MB" | "MIB" => 1 << 20,
        "GB" | "GIB" => 1 << 30,
        _ => return None,
    };
    Some(n * unit)
}

fn parse_dmidecode(text: &str) -> Result<SystemInfo> {
    #[derive(Default)]
    struct Device {
        size: Option<u64>,
        channel: Option<String>,
        kind: Option<String>,
        rank: Option<u64>,
        total_width: Option<u64>,
        data_width: Option<u64>,
    }
    let mut devices: Vec<Device> = Vec::new();
    let mut in_device = false;
    for line in text.lines() {
        if !line.starts_with(char::is_whitespace) {
            in_device = line.trim() == "Memory Device";
            if in_device {
                devices.push(Device::default());
            }
            continue;
        }
        let Some(dev) = devices.last_mut().filter(|_| in_device) else {
            continue;
        };
        let Some((key, value)) = line.trim().split_once(':') else {
            continue;
        };
        let value = value.trim();
        let width = |v: &str| v.split_whitespace().next().and_then(|n| n.parse().ok());
        match key {
            "Size" => dev.size = parse_size(value),
            "Locator" => {
                dev.channel = value
                    .strip_prefix("Channel")
                    .and_then(|rest| rest.split('-').next())
                    .map(str::to_string)
            }
            "Type" => dev.kind = Some(value.to_string()),
            "Rank" => dev.rank = value.parse().ok(),
            "Total Width" => dev.total_width = width(value),
            "Data Width" => dev.data_width = width(value),
            _ => {}
        }
    }
    let populated: Vec<&Device> = devices.iter().filter(|d| d.size.is_some()).collect();
    if populated.is_empty() {
        return Err(Error::parse("dmidecode", "no populated memory device"));
    }
    let mut channels: Vec<&str> = Vec::new();
    for d in &populated {
        let ch = d
            .channel
            .as_deref()
            .ok_or_else(|| Error::parse("dmidecode", "locator is not of the form ChannelX-DIMMn"))?;
        if !channels.contains(&ch) {
            channels.push(ch);
        }
    }
    let per_channel = populated.len() as u64 / channels.len() as u64;
    if per_channel * channels.len() as u64 != populated.len() as u64 {
        return Err(Error::parse("dmidecode", "channels are unevenly populated"));
    }
    let ranks = uniform(populated.iter().map(|d| d.rank), "Rank")?;
    let kind = uniform(populated.iter().map(|d| d.kind.clone()), "Type")?;
    let ecc = populated
        .iter()
        .all(|d| matches!((d.total_width, d.data_width), (Some(t), Some(w)) if t > w));
    Ok(SystemInfo {
        channels: Some(channels.len() as u64),
        dimms_per_channel: Some(per_channel),
        ranks_per_dimm: ranks,
        chip_type: kind.map(|k| k.parse()).transpose()?,
        total_memory: Some(populated.iter().filter_map(|d| d.size).sum()),
        ecc: Some(ecc),
        ..SystemInfo::default()
    })
}

fn uniform<T: PartialEq>(mut values: impl Iterator<Item = Option<T>>, field: &str) -> Result<Option<T>> {
    let first = values.next().flatten();
    for v in values {
        if v != first {
            return Err(Error::parse("dmidecode", format!("`{field}` differs between DIMMs")));
        }
    }
    Ok(first)
}

fn parse_decode_dimms(text: &str) -> Result<SystemInfo> {
    let mut info = SystemInfo::default();
    let mut dimm_sizes = Vec::new();
    let mut dimms_reported = None;
    for line in text.lines() {
        let line = line.trim();
        let field = |name: &str| line.strip_prefix(name).map(str::trim);
        if let Some(v) = field("Fundamental Memory type") {
            info.chip_type = Some(v.parse()?);
        } else if let Some(v) = field("Banks x Rows x Columns x Bits") {
            let banks = v
                .split('x')
                .next()
                .and_then(|b| b.trim().parse().ok())
                .ok_or_else(|| Error::parse("decode-dimms", format!("bad geometry `{v}`")))?;
            info.banks_per_rank = Some(banks);
        } else if let Some(v) = field("Ranks") {
            info.ranks_per_dimm = Some(parse_num("Ranks", v)?);
        } else if let Some(v) = field("Size") {
            dimm_sizes.push(parse_size(v).ok_or_else(|| Error::parse("decode-dimms", format!("bad size `{v}`")))?);
        } else if let Some(v) = field("Bus Width Extension") {
            info.ecc = Some(!v.starts_with('0'));
        } else if let Some(v) = line.strip_prefix("Number of SDRAM DIMMs detected and decoded:") {
            dimms_reported = Some(parse_num::<usize>("DIMM count", v)?);
        }
    }
    if info.chip_type.is_none() || dimm_sizes.is_empty() {
        return Err(Error::parse("decode-dimms", "missing memory type or size"));
    }
    if let Some(n) = dimms_reported {
        if n != dimm_sizes.len() {
            return Err(Error::parse("decode-dimms", "DIMM count does not match decoded blocks"));
        }
    }
    info.total_memory = Some(dimm_sizes.iter().sum());
    Ok(info)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(geom: (u64, u64, u64, u64), chip: ChipType, gib: u64) -> DramConfig {
        DramConfig::new(geom, chip, gib * GIB).unwrap()
    }

    #[test]
    fn total_banks_examples() {
        assert_eq!(cfg((2, 1, 1, 8), ChipType::Ddr3, 8).total_banks(), 16);
        assert_eq!(cfg((1, 1, 1, 8), ChipType::Ddr3, 4).total_banks(), 8);
        assert_eq!(cfg((1, 1, 1, 1), ChipType::Ddr3, 1).total_banks(), 1);
    }

    #[test]
    fn function_count_examples() {
        assert_eq!(expected_function_count(&cfg((2, 1, 1, 8), ChipType::Ddr3, 8)).unwrap(), 4);
        assert_eq!(expected_function_count(&cfg((2, 1, 2, 8), ChipType::Ddr3, 8)).unwrap(), 5);
        assert_eq!(expected_function_count(&cfg((1, 1, 1, 1), ChipType::Ddr3, 1)).unwrap(), 0);
        let mut bad = cfg((1, 1, 1, 8), ChipType::Ddr3, 4);
        bad.banks_per_rank = 3;
        assert!(matches!(expected_function_count(&bad), Err(Error::NonPowerOfTwoBanks(3))));
    }

    #[test]
    fn three_banks_per_rank_is_rejected() {
        let text = "channels = 1\ndimms_per_channel = 1\nranks_per_dimm = 1\nbanks_per_rank = 3\nchip_type = DDR3\ntotal_memory_bytes = 4294967296\necc = false\n";
        assert!(matches!(parse_system_info(text, None), Err(Error::NonPowerOfTwoBanks(3))));
    }

    #[test]
    fn empty_text_passes_config_through() {
        let c = cfg((2, 1, 2, 16), ChipType::Ddr4, 16);
        let fallback = SystemInfo::from(&c);
        assert_eq!(parse_system_info("", Some(&fallback)).unwrap(), c);
    }

    #[test]
    fn missing_field_is_incomplete() {
        let text = "channels = 1\nchip_type = DDR3\n";
        assert!(matches!(parse_system_info(text, None), Err(Error::IncompleteInfo(_))));
    }

    #[test]
    fn garbage_is_a_parse_error() {
        assert!(matches!(
            parse_system_info("this is not any known layout", None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn expected_counts_from_table() {
        let c = cfg((2, 1, 1, 8), ChipType::Ddr3, 8);
        let e = expected_bit_counts(&c).unwrap();
        assert_eq!((e.bank_bits, e.row_bits, e.column_bits), (4, 16, 13));
        assert!(consistency_warning(&c, &e).is_none());
        let c = cfg((2, 1, 2, 16), ChipType::Ddr4, 16);
        let e = expected_bit_counts(&c).unwrap();
        assert_eq!((e.bank_bits, e.row_bits, e.column_bits), (6, 15, 13));
    }

    #[test]
    fn unknown_density_needs_override() {
        let mut c = cfg((1, 1, 1, 1), ChipType::Ddr3, 4);
        assert!(matches!(expected_bit_counts(&c), Err(Error::UnsupportedDensity { .. })));
        c.row_bits = Some(17);
        c.column_bits = Some(13);
        let e = expected_bit_counts(&c).unwrap();
        assert_eq!((e.bank_bits, e.row_bits, e.column_bits), (0, 17, 13));
    }

    #[test]
    fn size_units() {
        assert_eq!(parse_size("8192 MB"), Some(8 * GIB));
        assert_eq!(parse_size("16 GB"), Some(16 * GIB));
        assert_eq!(parse_size("No Module Installed"), None);
    }
}
