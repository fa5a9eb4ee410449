//! Ciphertext randomness: quantize measurements into a bitstream and score
//! it with an SP 800-22 style battery.

mod report;
pub mod stats;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurement::Measurement;

pub use report::{render_csv, render_table};

/// Significance level for every test.
pub const ALPHA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum NistError {
    #[error("no values to quantize")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("all values are equal; nothing to quantize")]
    DegenerateRange,
    #[error("{test} needs at least {minimum} bits, got {found}")]
    InsufficientLength {
        test: TestKind,
        minimum: usize,
        found: usize,
    },
    #[error("{test}: {reason}")]
    BadParams { test: TestKind, reason: String },
    #[error("bitstream file: {0}")]
    Format(String),
    #[error("unknown test {0:?}")]
    UnknownTest(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Bits packed eight per byte, bit `i` at position `i % 8` of byte `i / 8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitStream {
    bytes: Vec<u8>,
    len: usize,
}

impl BitStream {
    /// Pack 0/1 values; any nonzero byte counts as a one.
    pub fn from_bits(bits: &[u8]) -> Self {
        let mut bytes = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b != 0 {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        Self {
            bytes,
            len: bits.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range");
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn packed(&self) -> &[u8] {
        &self.bytes
    }

    /// One byte per bit.
    pub fn unpack(&self) -> Vec<u8> {
        (0..self.len).map(|i| u8::from(self.get(i))).collect()
    }

    pub fn ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// File form: bit count as little-endian u64, then the packed bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = (self.len as u64).to_le_bytes().to_vec();
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn decode(data: &[u8]) -> Result<Self, NistError> {
        if data.len() < 8 {
            return Err(NistError::Format("missing length header".into()));
        }
        let len = u64::from_le_bytes(data[..8].try_into().unwrap()) as usize;
        let body = &data[8..];
        if body.len() != len.div_ceil(8) {
            return Err(NistError::Format(format!(
                "{len} bits need {} bytes, found {}",
                len.div_ceil(8),
                body.len()
            )));
        }
        let mut bytes = body.to_vec();
        if !len.is_multiple_of(8) {
            // Padding bits are ignored but must not leak into counts.
            *bytes.last_mut().unwrap() &= (1u8 << (len % 8)) - 1;
        }
        Ok(Self { bytes, len })
    }

    pub fn write(&self, path: &Path) -> Result<(), NistError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, NistError> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    /// 16 bits per value, affine over the global range, LSB first.
    #[default]
    Affine16,
    /// One bit per value: above the median or not.
    Median,
}

impl FromStr for Quantization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "affine16" => Ok(Self::Affine16),
            "median" => Ok(Self::Median),
            _ => Err(format!("unknown quantization {s:?} (affine16 | median)")),
        }
    }
}

/// Concatenate the measurement vectors in order and quantize them.
pub fn quantize(meas: &[Measurement], scheme: Quantization) -> Result<BitStream, NistError> {
    let values: Vec<f64> = meas.iter().flat_map(|m| m.values.iter().copied()).collect();
    quantize_values(&values, scheme)
}

pub fn quantize_values(values: &[f64], scheme: Quantization) -> Result<BitStream, NistError> {
    if values.is_empty() {
        return Err(NistError::Empty);
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(NistError::NonFinite(i));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(NistError::DegenerateRange);
    }
    let bits: Vec<u8> = match scheme {
        Quantization::Affine16 => values
            .iter()
            .flat_map(|&v| {
                let q = ((v - lo) / (hi - lo) * 65535.0 + 0.5).floor() as u16;
                (0..16).map(move |b| ((q >> b) & 1) as u8)
            })
            .collect(),
        Quantization::Median => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let median = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
            };
            values.iter().map(|&v| u8::from(v > median)).collect()
        }
    };
    Ok(BitStream::from_bits(&bits))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestKind {
    Frequency,
    BlockFrequency,
    CumulativeSums,
    Runs,
    LongestRun,
    Rank,
    Fft,
    NonOverlappingTemplate,
    OverlappingTemplate,
    Universal,
    ApproximateEntropy,
    RandomExcursions,
    Serial,
    LinearComplexity,
}

impl TestKind {
    pub const ALL: [TestKind; 14] = [
        Self::Frequency,
        Self::BlockFrequency,
        Self::CumulativeSums,
        Self::Runs,
        Self::LongestRun,
        Self::Rank,
        Self::Fft,
        Self::NonOverlappingTemplate,
        Self::OverlappingTemplate,
        Self::Universal,
        Self::ApproximateEntropy,
        Self::RandomExcursions,
        Self::Serial,
        Self::LinearComplexity,
    ];

    /// The default battery: everything except Runs and LongestRun.
    pub const TABLE: [TestKind; 12] = [
        Self::Frequency,
        Self::BlockFrequency,
        Self::CumulativeSums,
        Self::Rank,
        Self::Fft,
        Self::NonOverlappingTemplate,
        Self::OverlappingTemplate,
        Self::Universal,
        Self::ApproximateEntropy,
        Self::RandomExcursions,
        Self::Serial,
        Self::LinearComplexity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Frequency => "Frequency",
            Self::BlockFrequency => "BlockFrequency",
            Self::CumulativeSums => "CumulativeSums",
            Self::Runs => "Runs",
            Self::LongestRun => "LongestRun",
            Self::Rank => "Rank",
            Self::Fft => "FFT",
            Self::NonOverlappingTemplate => "NonOverlappingTemplate",
            Self::OverlappingTemplate => "OverlappingTemplate",
            Self::Universal => "Universal",
            Self::ApproximateEntropy => "ApproximateEntropy",
            Self::RandomExcursions => "RandomExcursions",
            Self::Serial => "Serial",
            Self::LinearComplexity => "LinearComplexity",
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestKind {
    type Err = NistError;
    fn from_str(s: &str) -> Result<Self, NistError> {
        let key = s.to_ascii_lowercase().replace(['_', '-', ' '], "");
        Self::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == key || (key == "longruns" && *k == Self::LongestRun))
            .ok_or_else(|| NistError::UnknownTest(s.to_string()))
    }
}

/// Test parameters; `None` picks the recommended value for the stream length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestParams {
    pub block_frequency_m: Option<usize>,
    pub serial_m: Option<usize>,
    pub approximate_entropy_m: Option<usize>,
    /// Universal block length `L` and initialization blocks `Q`.
    pub universal_l: Option<usize>,
    pub universal_q: Option<usize>,
    pub template: String,
    pub template_blocks: usize,
    pub overlapping_m: usize,
    pub overlapping_block: usize,
    pub linear_complexity_m: usize,
    pub min_excursion_cycles: usize,
    /// Also run Runs and LongestRun in the battery.
    pub include_runs: bool,
}

impl Default for TestParams {
    fn default() -> Self {
        Self {
            block_frequency_m: None,
            serial_m: None,
            approximate_entropy_m: None,
            universal_l: None,
            universal_q: None,
            template: "000000001".into(),
            template_blocks: 8,
            overlapping_m: 9,
            overlapping_block: 1032,
            linear_complexity_m: 500,
            min_excursion_cycles: 500,
            include_runs: false,
        }
    }
}

/// Recommended block length for BlockFrequency.
pub fn default_block_frequency_m(n: usize) -> usize {
    if n >= 12_800 {
        128
    } else {
        20usize.max(n.div_ceil(100))
    }
}

pub fn default_serial_m(n: usize) -> usize {
    if n >= 256 {
        5
    } else {
        2
    }
}

pub fn default_approximate_entropy_m(n: usize) -> usize {
    floor_log2(n).saturating_sub(6).clamp(2, 10)
}

fn floor_log2(n: usize) -> usize {
    (usize::BITS - 1 - n.max(1).leading_zeros()) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: TestKind,
    pub p_values: Vec<f64>,
    pub pass: bool,
    /// Parameters and intermediate statistics, in a fixed order.
    pub detail: Vec<(String, f64)>,
}

impl TestResult {
    fn from_outcome(test: TestKind, out: stats::Outcome) -> Self {
        let pass = out.p_values.iter().all(|&p| p >= ALPHA);
        Self {
            test,
            p_values: out.p_values,
            pass,
            detail: out.detail,
        }
    }

    pub fn min_p(&self) -> f64 {
        self.p_values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn need(test: TestKind, minimum: usize, n: usize) -> Result<(), NistError> {
    if n < minimum {
        Err(NistError::InsufficientLength {
            test,
            minimum,
            found: n,
        })
    } else {
        Ok(())
    }
}

fn bad(test: TestKind, reason: impl Into<String>) -> NistError {
    NistError::BadParams {
        test,
        reason: reason.into(),
    }
}

/// Run one test with length checks and parameter defaults.
pub fn run_test(kind: TestKind, bits: &BitStream, params: &TestParams) -> Result<TestResult, NistError> {
    run_on_bits(kind, &bits.unpack(), params)
}

/// [`run_test`] on unpacked bits (one 0/1 per byte).
pub fn run_on_bits(kind: TestKind, bits: &[u8], params: &TestParams) -> Result<TestResult, NistError> {
    let n = bits.len();
    let out = match kind {
        TestKind::Frequency => {
            need(kind, 100, n)?;
            stats::frequency(bits)
        }
        TestKind::BlockFrequency => {
            need(kind, 100, n)?;
            let m = params.block_frequency_m.unwrap_or_else(|| default_block_frequency_m(n));
            if m == 0 || m > n {
                return Err(bad(kind, format!("block length {m} for {n} bits")));
            }
            stats::block_frequency(bits, m)
        }
        TestKind::CumulativeSums => {
            need(kind, 100, n)?;
            stats::cumulative_sums(bits)
        }
        TestKind::Runs => {
            need(kind, 100, n)?;
            stats::runs(bits)
        }
        TestKind::LongestRun => {
            need(kind, 128, n)?;
            stats::longest_run(bits)
        }
        TestKind::Rank => {
            need(kind, 38_912, n)?;
            stats::rank(bits, 32, 32)
        }
        TestKind::Fft => {
            need(kind, 1000, n)?;
            stats::spectral(bits)
        }
        TestKind::NonOverlappingTemplate => {
            let template = parse_template(kind, &params.template)?;
            let blocks = params.template_blocks;
            if blocks == 0 {
                return Err(bad(kind, "template_blocks must be positive"));
            }
            // Each block must be able to hold about one expected match.
            need(kind, blocks * (1 << template.len()), n)?;
            stats::non_overlapping_template(bits, &template, blocks)
        }
        TestKind::OverlappingTemplate => {
            need(kind, 1_000_000, n)?;
            let (m, block) = (params.overlapping_m, params.overlapping_block);
            if m == 0 || m >= block || m > 24 {
                return Err(bad(kind, format!("template length {m} with block {block}")));
            }
            let probs = if (m, block) == (9, 1032) {
                stats::OVERLAPPING_DEFAULT_PROBS.to_vec()
            } else {
                stats::overlapping_probabilities(m, block, 5)
            };
            stats::overlapping_template(bits, m, block, &probs)
        }
        TestKind::Universal => {
            let l = match params.universal_l {
                Some(l) => l,
                None => stats::universal_block_length(n).ok_or(NistError::InsufficientLength {
                    test: kind,
                    minimum: 387_840,
                    found: n,
                })?,
            };
            if !(1..=16).contains(&l) {
                return Err(bad(kind, format!("block length {l} outside 1..=16")));
            }
            let q = params.universal_q.unwrap_or(10 << l);
            if n / l <= q {
                return Err(bad(kind, format!("{n} bits leave no test blocks after Q = {q}")));
            }
            stats::universal(bits, l, q)
        }
        TestKind::ApproximateEntropy => {
            need(kind, 100, n)?;
            let m = params
                .approximate_entropy_m
                .unwrap_or_else(|| default_approximate_entropy_m(n));
            if m == 0 || m + 5 >= floor_log2(n) {
                return Err(NistError::InsufficientLength {
                    test: kind,
                    minimum: 1 << (m + 6),
                    found: n,
                });
            }
            stats::approximate_entropy(bits, m)
        }
        TestKind::RandomExcursions => {
            need(kind, 1_000_000, n)?;
            let cycles = stats::excursion_cycles(bits);
            if cycles < params.min_excursion_cycles {
                return Err(bad(
                    kind,
                    format!("{cycles} cycles, at least {} required", params.min_excursion_cycles),
                ));
            }
            stats::random_excursions(bits)
        }
        TestKind::Serial => {
            need(kind, 100, n)?;
            let m = params.serial_m.unwrap_or_else(|| default_serial_m(n));
            if m < 2 || m + 2 >= floor_log2(n) {
                return Err(bad(kind, format!("pattern length {m} too long for {n} bits")));
            }
            stats::serial(bits, m)
        }
        TestKind::LinearComplexity => {
            need(kind, 1_000_000, n)?;
            let m = params.linear_complexity_m;
            if !(500..=5000).contains(&m) {
                return Err(bad(kind, format!("block length {m} outside 500..=5000")));
            }
            if n / m < 200 {
                return Err(bad(kind, format!("{} blocks, at least 200 required", n / m)));
            }
            stats::linear_complexity(bits, m)
        }
    };
    Ok(TestResult::from_outcome(kind, out))
}

fn parse_template(kind: TestKind, s: &str) -> Result<Vec<u8>, NistError> {
    if s.is_empty() || s.len() > 24 || !s.bytes().all(|c| c == b'0' || c == b'1') {
        return Err(bad(kind, format!("template {s:?} is not 1..=24 binary digits")));
    }
    Ok(s.bytes().map(|c| c - b'0').collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Verdict {
    Ran(TestResult),
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryEntry {
    pub test: TestKind,
    pub verdict: Verdict,
}

impl BatteryEntry {
    pub fn passed(&self) -> bool {
        matches!(&self.verdict, Verdict::Ran(r) if r.pass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryReport {
    pub stream_bits: usize,
    pub ones: usize,
    pub entries: Vec<BatteryEntry>,
}

impl BatteryReport {
    pub fn pass_count(&self) -> usize {
        self.entries.iter().filter(|e| e.passed()).count()
    }

    pub fn applicable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.verdict, Verdict::Ran(_)))
            .count()
    }

    pub fn get(&self, test: TestKind) -> Option<&BatteryEntry> {
        self.entries.iter().find(|e| e.test == test)
    }
}

/// Run the table battery (plus Runs and LongestRun when enabled), in a
/// fixed order. Tests that cannot run are recorded as skipped.
pub fn run_battery(bits: &BitStream, params: &TestParams) -> BatteryReport {
    let unpacked = bits.unpack();
    let kinds: Vec<TestKind> = if params.include_runs {
        TestKind::ALL.to_vec()
    } else {
        TestKind::TABLE.to_vec()
    };
    let entries = kinds
        .into_iter()
        .map(|test| {
            let verdict = match run_on_bits(test, &unpacked, params) {
                Ok(r) => Verdict::Ran(r),
                Err(e) => Verdict::Skipped {
                    reason: e.to_string(),
                },
            };
            BatteryEntry { test, verdict }
        })
        .collect();
    BatteryReport {
        stream_bits: bits.len(),
        ones: bits.ones(),
        entries,
    }
}
