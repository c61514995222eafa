//! Physical/DRAM address types, XOR bank functions and the mapping file format.
//!
//! A mapping file is `key = value` text with three keys:
//!
//! ```text
//! functions = [[6], [14, 17], [15, 18], [16, 19]]
//! row_bits = 17..32
//! column_bits = [0..5, 7..13]
//! ```
//!
//! Ranges are inclusive. Row and column values are assembled with ascending
//! bit position as ascending significance.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::ops::BitXor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf2::{self, parity, XorBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhysicalAddress(pub u64);

impl PhysicalAddress {
    pub fn bit(self, pos: u32) -> u64 {
        self.0 >> pos & 1
    }

    pub fn page(self, page_size: u64) -> u64 {
        self.0 & !(page_size - 1)
    }
}

impl BitXor<u64> for PhysicalAddress {
    type Output = PhysicalAddress;

    fn bitxor(self, rhs: u64) -> PhysicalAddress {
        PhysicalAddress(self.0 ^ rhs)
    }
}

impl fmt::Display for PhysicalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl fmt::LowerHex for PhysicalAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

/// Bank index folds channel, DIMM, rank and bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DramAddress {
    pub bank: u64,
    pub row: u64,
    pub column: u64,
}

/// A set of physical-address bits whose XOR yields one bank-index bit.
///
/// Ordering is priority order: fewer bits first, then lexicographic on the
/// ascending bit list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct BankFunction(u64);

impl BankFunction {
    pub fn from_mask(mask: u64) -> Result<Self> {
        if mask == 0 {
            return Err(Error::parse("bank function", "empty bit set"));
        }
        Ok(BankFunction(mask))
    }

    pub fn from_bits(bits: &[u32]) -> Result<Self> {
        let mut mask = 0u64;
        for &b in bits {
            if b >= 64 {
                return Err(Error::parse("bank function", format!("bit {b} out of range")));
            }
            if mask >> b & 1 == 1 {
                return Err(Error::parse("bank function", format!("bit {b} repeated")));
            }
            mask |= 1 << b;
        }
        Self::from_mask(mask)
    }

    pub fn mask(self) -> u64 {
        self.0
    }

    pub fn bits(self) -> Vec<u32> {
        bit_positions(self.0)
    }

    pub fn weight(self) -> u32 {
        self.0.count_ones()
    }

    pub fn lowest(self) -> u32 {
        self.0.trailing_zeros()
    }

    pub fn highest(self) -> u32 {
        63 - self.0.leading_zeros()
    }

    pub fn contains(self, bit: u32) -> bool {
        self.0 >> bit & 1 == 1
    }

    pub fn eval(self, addr: PhysicalAddress) -> u64 {
        parity(addr.0 & self.0)
    }
}

impl Ord for BankFunction {
    fn cmp(&self, other: &Self) -> Ordering {
        priority_cmp(self.0, other.0)
    }
}

impl PartialOrd for BankFunction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl TryFrom<Vec<u32>> for BankFunction {
    type Error = Error;

    fn try_from(bits: Vec<u32>) -> Result<Self> {
        BankFunction::from_bits(&bits)
    }
}

impl From<BankFunction> for Vec<u32> {
    fn from(f: BankFunction) -> Vec<u32> {
        f.bits()
    }
}

impl fmt::Display for BankFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits: Vec<String> = self.bits().iter().map(u32::to_string).collect();
        write!(f, "({})", bits.join(", "))
    }
}

/// Fewer bits first; ties broken by the ascending bit lists, compared lexicographically.
pub fn priority_cmp(a: u64, b: u64) -> Ordering {
    a.count_ones().cmp(&b.count_ones()).then_with(|| {
        let diff = a ^ b;
        if diff == 0 {
            Ordering::Equal
        } else if a >> diff.trailing_zeros() & 1 == 1 {
            // equal weight: whoever owns the lowest differing bit sorts first
            Ordering::Less
        } else {
            Ordering::Greater
        }
    })
}

pub fn bit_positions(mask: u64) -> Vec<u32> {
    (0..64).filter(|&b| mask >> b & 1 == 1).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AddressMapping {
    pub bank_functions: Vec<BankFunction>,
    pub row_bits: Vec<u32>,
    pub column_bits: Vec<u32>,
}

/// The mapping installed in the simulated controller.
pub type GroundTruthMapping = AddressMapping;

impl AddressMapping {
    pub fn new(bank_functions: Vec<BankFunction>, row_bits: Vec<u32>, column_bits: Vec<u32>) -> Self {
        AddressMapping {
            bank_functions,
            row_bits,
            column_bits,
        }
    }

    pub fn bank_count(&self) -> u64 {
        1 << self.bank_functions.len()
    }

    pub fn map(&self, addr: PhysicalAddress) -> DramAddress {
        let mut bank = 0;
        for (i, f) in self.bank_functions.iter().enumerate() {
            bank |= f.eval(addr) << i;
        }
        DramAddress {
            bank,
            row: gather(addr, &self.row_bits),
            column: gather(addr, &self.column_bits),
        }
    }

    pub fn row_mask(&self) -> u64 {
        self.row_bits.iter().fold(0, |m, &b| m | 1 << b)
    }

    pub fn column_mask(&self) -> u64 {
        self.column_bits.iter().fold(0, |m, &b| m | 1 << b)
    }

    pub fn function_bit_mask(&self) -> u64 {
        self.bank_functions.iter().fold(0, |m, f| m | f.mask())
    }

    /// Same bank, different row.
    pub fn is_sbdr(&self, a: PhysicalAddress, b: PhysicalAddress) -> bool {
        let diff = a.0 ^ b.0;
        diff & self.row_mask() != 0 && self.bank_functions.iter().all(|f| parity(diff & f.mask()) == 0)
    }

    pub fn highest_bit(&self) -> Option<u32> {
        let all = self.row_mask() | self.column_mask() | self.function_bit_mask();
        (all != 0).then(|| 63 - all.leading_zeros())
    }

    /// Functions in priority order, bit lists ascending.
    pub fn sorted(&self) -> AddressMapping {
        let mut m = self.clone();
        m.bank_functions.sort();
        m.row_bits.sort_unstable();
        m.row_bits.dedup();
        m.column_bits.sort_unstable();
        m.column_bits.dedup();
        m
    }

    /// Canonical form: the function list is replaced by the priority-greedy
    /// minimum-weight basis of its span, so that two function sets inducing the
    /// same bank partition compare equal.
    pub fn canonical(&self) -> AddressMapping {
        let mut m = self.sorted();
        m.bank_functions = canonical_basis(&self.bank_functions);
        m
    }

    pub fn functions_equivalent(&self, other: &AddressMapping) -> bool {
        let a: Vec<u64> = self.bank_functions.iter().map(|f| f.mask()).collect();
        let b: Vec<u64> = other.bank_functions.iter().map(|f| f.mask()).collect();
        let ra = gf2::rank(&a);
        ra == gf2::rank(&b) && ra == gf2::rank(&[a, b].concat())
    }

    pub fn parse(text: &str) -> Result<AddressMapping> {
        let mut functions = None;
        let mut rows = None;
        let mut cols = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("mapping", format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "functions" => functions = Some(parse_function_list(value)?),
                "row_bits" => rows = Some(parse_bit_list(value)?),
                "column_bits" => cols = Some(parse_bit_list(value)?),
                other => return Err(Error::parse("mapping", format!("unknown key `{other}`"))),
            }
        }
        let bank_functions = functions.ok_or_else(|| Error::parse("mapping", "missing `functions`"))?;
        let row_bits = rows.ok_or_else(|| Error::parse("mapping", "missing `row_bits`"))?;
        let column_bits = cols.ok_or_else(|| Error::parse("mapping", "missing `column_bits`"))?;
        if row_bits.iter().any(|b| column_bits.contains(b)) {
            return Err(Error::parse("mapping", "row and column bits overlap"));
        }
        Ok(AddressMapping::new(bank_functions, row_bits, column_bits))
    }

    /// Serializes in the fixture format; canonical when called on `canonical()`.
    pub fn render(&self) -> String {
        let funcs: Vec<String> = self
            .bank_functions
            .iter()
            .map(|f| {
                let bits: Vec<String> = f.bits().iter().map(u32::to_string).collect();
                format!("[{}]", bits.join(", "))
            })
            .collect();
        format!(
            "functions = [{}]\nrow_bits = {}\ncolumn_bits = {}\n",
            funcs.join(", "),
            format_bit_list(&self.row_bits),
            format_bit_list(&self.column_bits)
        )
    }
}

fn gather(addr: PhysicalAddress, bits: &[u32]) -> u64 {
    bits.iter()
        .enumerate()
        .fold(0, |acc, (i, &b)| acc | addr.bit(b) << i)
}

/// Minimum-weight basis of the span of `functions`, chosen greedily in priority order.
pub fn canonical_basis(functions: &[BankFunction]) -> Vec<BankFunction> {
    let masks: Vec<u64> = functions.iter().map(|f| f.mask()).collect();
    let r = gf2::rank(&masks);
    if r > 20 {
        let mut sorted = functions.to_vec();
        sorted.sort();
        return sorted;
    }
    let mut elems: Vec<u64> = gf2::span(&masks).into_iter().filter(|&v| v != 0).collect();
    elems.sort_by(|&a, &b| priority_cmp(a, b));
    let mut basis = XorBasis::new();
    let mut out = Vec::with_capacity(r);
    for v in elems {
        if out.len() == r {
            break;
        }
        if basis.insert(v) {
            out.push(BankFunction(v));
        }
    }
    out
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Formats ascending bits as `a..b`, `[a..b, c, d..e]` or `[]`.
pub fn format_bit_list(bits: &[u32]) -> String {
    let mut sorted = bits.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut runs: Vec<(u32, u32)> = Vec::new();
    for b in sorted {
        match runs.last_mut() {
            Some((_, hi)) if *hi + 1 == b => *hi = b,
            _ => runs.push((b, b)),
        }
    }
    let item = |&(lo, hi): &(u32, u32)| {
        if lo == hi {
            lo.to_string()
        } else {
            format!("{lo}..{hi}")
        }
    };
    match runs.as_slice() {
        [(lo, hi)] if lo != hi => item(&(*lo, *hi)),
        _ => format!("[{}]", runs.iter().map(item).collect::<Vec<_>>().join(", ")),
    }
}

pub fn parse_bit_list(value: &str) -> Result<Vec<u32>> {
    let value = value.trim();
    let inner = match value.strip_prefix('[') {
        Some(rest) => rest
            .strip_suffix(']')
            .ok_or_else(|| Error::parse("bit list", format!("unterminated list `{value}`")))?,
        None => value,
    };
    let mut out = BTreeSet::new();
    for item in inner.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bits = match item.split_once("..") {
            Some((lo, hi)) => {
                let lo = parse_bit(lo)?;
                let hi = parse_bit(hi)?;
                if lo > hi {
                    return Err(Error::parse("bit list", format!("descending range `{item}`")));
                }
                (lo..=hi).collect::<Vec<_>>()
            }
            None => vec![parse_bit(item)?],
        };
        for b in bits {
            if !out.insert(b) {
                return Err(Error::parse("bit list", format!("bit {b} listed twice")));
            }
        }
    }
    Ok(out.into_iter().collect())
}

fn parse_bit(s: &str) -> Result<u32> {
    let b: u32 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse("bit list", format!("bad bit position `{s}`")))?;
    if b >= 64 {
        return Err(Error::parse("bit list", format!("bit {b} out of range")));
    }
    Ok(b)
}

fn parse_function_list(value: &str) -> Result<Vec<BankFunction>> {
    let inner = value
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| Error::parse("functions", "expected `[[..], ..]`"))?;
    let mut out = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let start = rest
            .find('[')
            .ok_or_else(|| Error::parse("functions", format!("unexpected `{rest}`")))?;
        if !rest[..start].trim().trim_matches(',').trim().is_empty() {
            return Err(Error::parse("functions", format!("unexpected `{}`", &rest[..start])));
        }
        let end = rest[start..]
            .find(']')
            .ok_or_else(|| Error::parse("functions", "unterminated function"))?
            + start;
        let bits = parse_bit_list(&rest[start..=end])?;
        out.push(BankFunction::from_bits(&bits)?);
        rest = rest[end + 1..].trim_start_matches(|c: char| c == ',' || c.is_whitespace());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no1() -> AddressMapping {
        AddressMapping::parse(
            "functions = [[6],[14,17],[15,18],[16,19]]\nrow_bits = 17..32\ncolumn_bits = [0..5, 7..13]\n",
        )
        .unwrap()
    }

    #[test]
    fn parses_the_documented_format() {
        let m = no1();
        assert_eq!(m.bank_functions.len(), 4);
        assert_eq!(m.bank_functions[1].bits(), vec![14, 17]);
        assert_eq!(m.row_bits, (17..=32).collect::<Vec<_>>());
        assert_eq!(m.column_bits, vec![0, 1, 2, 3, 4, 5, 7, 8, 9, 10, 11, 12, 13]);
    }

    #[test]
    fn render_round_trips() {
        let m = no1();
        let text = m.render();
        assert_eq!(
            text,
            "functions = [[6], [14, 17], [15, 18], [16, 19]]\nrow_bits = 17..32\ncolumn_bits = [0..5, 7..13]\n"
        );
        assert_eq!(AddressMapping::parse(&text).unwrap(), m);
    }

    #[test]
    fn map_all_zero_address() {
        let d = no1().map(PhysicalAddress(0));
        assert_eq!(d, DramAddress { bank: 0, row: 0, column: 0 });
    }

    #[test]
    fn map_single_row_bit_in_function() {
        // bit 17 feeds (14, 17), the second function, and is the lowest row bit
        let d = no1().map(PhysicalAddress(1 << 17));
        assert_eq!(d.bank, 0b0010);
        assert_eq!(d.row, 1);
        assert_eq!(d.column, 0);
    }

    #[test]
    fn map_xor_cancels() {
        let d = no1().map(PhysicalAddress((1 << 14) | (1 << 17)));
        assert_eq!(d.bank, 0);
        assert_eq!(d.row, 1);
    }

    #[test]
    fn priority_order() {
        let f = |b: &[u32]| BankFunction::from_bits(b).unwrap();
        let mut v = vec![f(&[14, 15, 18, 19]), f(&[15, 19]), f(&[14, 18]), f(&[6])];
        v.sort();
        assert_eq!(v, vec![f(&[6]), f(&[14, 18]), f(&[15, 19]), f(&[14, 15, 18, 19])]);
        assert!(f(&[8, 9, 12, 13, 15, 18]) < f(&[8, 9, 12, 13, 18, 19]));
    }

    #[test]
    fn canonical_basis_is_span_invariant() {
        let f = |b: &[u32]| BankFunction::from_bits(b).unwrap();
        let a = vec![f(&[14, 18]), f(&[15, 19])];
        let b = vec![f(&[14, 15, 18, 19]), f(&[14, 18])];
        assert_eq!(canonical_basis(&a), canonical_basis(&b));
        assert_eq!(canonical_basis(&b), vec![f(&[14, 18]), f(&[15, 19])]);
    }

    #[test]
    fn rejects_malformed_lists() {
        assert!(parse_bit_list("[3..1]").is_err());
        assert!(parse_bit_list("[1, 1]").is_err());
        assert!(parse_bit_list("[1, x]").is_err());
        assert!(parse_bit_list("[1, 2").is_err());
        assert!(AddressMapping::parse("functions = [[]]\nrow_bits = 1\ncolumn_bits = 0").is_err());
        assert!(AddressMapping::parse("row_bits = 1\ncolumn_bits = 0").is_err());
        assert!(AddressMapping::parse("functions = []\nrow_bits = 1\ncolumn_bits = 1").is_err());
    }

    #[test]
    fn bit_list_formats() {
        assert_eq!(format_bit_list(&[]), "[]");
        assert_eq!(format_bit_list(&[4]), "[4]");
        assert_eq!(format_bit_list(&[0, 1, 2, 12]), "[0..2, 12]");
        assert_eq!(format_bit_list(&[3, 2, 1]), "1..3");
    }
}
