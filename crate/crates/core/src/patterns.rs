//! Modulation patterns: permuted binary Hadamard sets, regional field-of-view
//! masks and containers for learned real-valued patterns.
//!
//! Patterns are stored in the coordinates of the mask's active pixels
//! (row-major order); full-field rasters are materialized on demand and are
//! zero outside the mask.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{encode_pgm, DatasetError, Image};
use crate::rng::{tags, Rng};

/// Largest order accepted by [`hadamard_matrix`] (dense storage).
pub const DENSE_ORDER_LIMIT: u32 = 14;
/// Largest order of an implicit Hadamard pattern set.
pub const PATTERN_ORDER_LIMIT: u32 = 24;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("Hadamard order 2^{order} outside the supported range 2^1..=2^{limit}")]
    OrderTooLarge { order: u32, limit: u32 },
    #[error("mask has {0} active pixels, at least 4 are required")]
    MaskEmpty(usize),
    #[error("{strategy} parameter {param} out of range for a {width}x{height} field")]
    ParamOutOfRange {
        strategy: &'static str,
        param: usize,
        width: usize,
        height: usize,
    },
    #[error("sampling rate {0} outside (0, 1]")]
    SamplingRate(f64),
    #[error("pattern data has {found} values, expected {expected}")]
    Shape { expected: usize, found: usize },
    #[error("malformed pattern file: {0}")]
    Format(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FovStrategy {
    Full,
    ACentral,
    BInterleaved,
}

impl FovStrategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::ACentral => "a_central",
            Self::BInterleaved => "b_interleaved",
        }
    }
}

impl std::str::FromStr for FovStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Self::Full),
            "a" | "a_central" => Ok(Self::ACentral),
            "b" | "b_interleaved" => Ok(Self::BInterleaved),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

/// Modulated region of a `width x height` field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FovMask {
    strategy: FovStrategy,
    width: usize,
    height: usize,
    param: usize,
    active: Vec<usize>,
}

impl FovMask {
    pub fn strategy(&self) -> FovStrategy {
        self.strategy
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Square side for `ACentral`, row/column count for `BInterleaved`,
    /// field width for `Full`.
    pub fn param(&self) -> usize {
        self.param
    }

    /// Row-major indices of the active pixels.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    pub fn is_active(&self, x: usize, y: usize) -> bool {
        self.active.binary_search(&(y * self.width + x)).is_ok()
    }

    /// Short text form, e.g. `a_central:32@64x64`.
    pub fn descriptor(&self) -> String {
        format!(
            "{}:{}@{}x{}",
            self.strategy.name(),
            self.param,
            self.width,
            self.height
        )
    }
}

/// Evenly spaced indices `floor(i * dim / k)` for `i in 0..k`.
fn spaced(k: usize, dim: usize) -> Vec<bool> {
    let mut on = vec![false; dim];
    for i in 0..k {
        on[i * dim / k] = true;
    }
    on
}

pub fn make_mask(
    strategy: FovStrategy,
    width: usize,
    height: usize,
    param: Option<usize>,
) -> Result<FovMask, PatternError> {
    if width == 0 || height == 0 {
        return Err(DatasetError::ZeroDimension { width, height }.into());
    }
    let out_of_range = |param| PatternError::ParamOutOfRange {
        strategy: strategy.name(),
        param,
        width,
        height,
    };
    let (param, active): (usize, Vec<usize>) = match strategy {
        FovStrategy::Full => (width, (0..width * height).collect()),
        FovStrategy::ACentral => {
            let w = param.unwrap_or(width.min(height));
            if w == 0 || w > width.min(height) {
                return Err(out_of_range(w));
            }
            let (x0, y0) = ((width - w) / 2, (height - w) / 2);
            let active = (y0..y0 + w)
                .flat_map(|y| (x0..x0 + w).map(move |x| y * width + x))
                .collect();
            (w, active)
        }
        FovStrategy::BInterleaved => {
            let k = param.unwrap_or(width.min(height));
            if k == 0 || k > width.min(height) {
                return Err(out_of_range(k));
            }
            let (rows, cols) = (spaced(k, height), spaced(k, width));
            let active = (0..height)
                .filter(|&y| rows[y])
                .flat_map(|y| (0..width).filter(|&x| cols[x]).map(move |x| y * width + x))
                .collect();
            (k, active)
        }
    };
    Ok(FovMask {
        strategy,
        width,
        height,
        param,
        active,
    })
}

/// Unnormalized `2^n x 2^n` Hadamard matrix of `+-1` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HadamardMatrix {
    order_log2: u32,
    entries: Vec<i8>,
}

impl HadamardMatrix {
    pub fn size(&self) -> usize {
        1 << self.order_log2
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.size() + j]
    }

    pub fn row(&self, i: usize) -> &[i8] {
        let n = self.size();
        &self.entries[i * n..(i + 1) * n]
    }
}

/// Entry `(i, j)` of the Sylvester-ordered Hadamard matrix, the fixed point
/// of `H_n = [[H_{n-1}, H_{n-1}], [H_{n-1}, -H_{n-1}]]`.
#[inline]
pub fn walsh(i: usize, j: usize) -> i8 {
    if (i & j).count_ones().is_multiple_of(2) {
        1
    } else {
        -1
    }
}

pub fn hadamard_matrix(order_log2: u32) -> Result<HadamardMatrix, PatternError> {
    if !(1..=DENSE_ORDER_LIMIT).contains(&order_log2) {
        return Err(PatternError::OrderTooLarge {
            order: order_log2,
            limit: DENSE_ORDER_LIMIT,
        });
    }
    let n = 1usize << order_log2;
    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        entries.extend((0..n).map(|j| walsh(i, j)));
    }
    Ok(HadamardMatrix {
        order_log2,
        entries,
    })
}

/// In-place unnormalized fast Walsh-Hadamard transform (Sylvester order).
/// `data.len()` must be a power of two.
pub fn fwht<T>(data: &mut [T])
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Sub<Output = T>,
{
    let n = data.len();
    assert!(n.is_power_of_two(), "fwht length {n} is not a power of two");
    let mut h = 1;
    while h < n {
        for block in data.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (x, y) = (*a, *b);
                *a = x + y;
                *b = x - y;
            }
        }
        h *= 2;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    HadamardPermuted,
    Learned,
}

impl PatternKind {
    fn tag(self) -> u32 {
        match self {
            Self::HadamardPermuted => 0,
            Self::Learned => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Storage {
    /// Pattern `k` at active slot `j` is `(1 + walsh(rows[k], cols[j])) / 2`.
    Hadamard {
        order_log2: u32,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    /// `m x n_active`, row-major.
    Dense(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternSet {
    kind: PatternKind,
    mask: FovMask,
    seed: u64,
    sampling_rate: f64,
    len: usize,
    pub(crate) storage: Storage,
}

impl PatternSet {
    /// Wrap learned patterns given in active-pixel coordinates (`m x n_active`).
    pub fn learned(
        mask: FovMask,
        values: Vec<f64>,
        m: usize,
        seed: u64,
    ) -> Result<Self, PatternError> {
        let n = mask.n_active();
        if m == 0 || values.len() != m * n {
            return Err(PatternError::Shape {
                expected: m * n,
                found: values.len(),
            });
        }
        Ok(Self {
            kind: PatternKind::Learned,
            sampling_rate: m as f64 / n as f64,
            mask,
            seed,
            len: m,
            storage: Storage::Dense(values),
        })
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    pub fn mask(&self) -> &FovMask {
        &self.mask
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Requested rate for Hadamard sets, `m / n_active` for learned ones.
    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    /// Number of patterns `m`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn field_dims(&self) -> (usize, usize) {
        self.mask.dims()
    }

    /// Hadamard row index behind each pattern.
    pub fn hadamard_rows(&self) -> Option<&[usize]> {
        match &self.storage {
            Storage::Hadamard { rows, .. } => Some(rows),
            Storage::Dense(_) => None,
        }
    }

    /// Pattern `k` over the active pixels.
    pub fn active_pattern(&self, k: usize) -> Vec<f64> {
        match &self.storage {
            Storage::Hadamard { rows, cols, .. } => {
                let r = rows[k];
                cols.iter().map(|&c| f64::from((1 + walsh(r, c)) / 2)).collect()
            }
            Storage::Dense(v) => {
                let n = self.mask.n_active();
                v[k * n..(k + 1) * n].to_vec()
            }
        }
    }

    /// Pattern `k` as a full-field row-major raster.
    pub fn pattern(&self, k: usize) -> Vec<f64> {
        let (w, h) = self.field_dims();
        let mut out = vec![0.0; w * h];
        for (&p, v) in self.mask.active().iter().zip(self.active_pattern(k)) {
            out[p] = v;
        }
        out
    }

    /// Copy of the set holding patterns `order[0], order[1], ...`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let storage = match &self.storage {
            Storage::Hadamard {
                order_log2,
                rows,
                cols,
            } => Storage::Hadamard {
                order_log2: *order_log2,
                rows: order.iter().map(|&k| rows[k]).collect(),
                cols: cols.clone(),
            },
            Storage::Dense(_) => Storage::Dense(
                order.iter().flat_map(|&k| self.active_pattern(k)).collect(),
            ),
        };
        Self {
            len: order.len(),
            storage,
            ..self.clone()
        }
    }

    /// Pattern `k` as an 8-bit image: values clipped to `[0, 1]`, times 255.
    pub fn pattern_image(&self, k: usize) -> Image {
        let (w, h) = self.field_dims();
        let px = self
            .pattern(k)
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect();
        Image::new(w, h, px).expect("mask dims are positive")
    }

    /// Binary export: header `m, width, height, kind` (little-endian u32)
    /// then `m * width * height` little-endian f64, patterns clipped to `[0, 1]`.
    pub fn encode(&self) -> Vec<u8> {
        let (w, h) = self.field_dims();
        let mut out = Vec::with_capacity(16 + self.len * w * h * 8);
        for field in [self.len as u32, w as u32, h as u32, self.kind.tag()] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        for k in 0..self.len {
            for v in self.pattern(k) {
                out.extend_from_slice(&v.clamp(0.0, 1.0).to_le_bytes());
            }
        }
        out
    }

    pub fn write_binary(&self, path: &Path) -> Result<(), PatternError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    /// Write `pattern_00000.pgm`, ... into `dir`.
    pub fn write_pgm_stack(&self, dir: &Path) -> Result<(), PatternError> {
        fs::create_dir_all(dir)?;
        for k in 0..self.len {
            fs::write(
                dir.join(format!("pattern_{k:05}.pgm")),
                encode_pgm(&self.pattern_image(k)),
            )?;
        }
        Ok(())
    }
}

/// Decoded binary pattern file: `(kind tag, width, height, patterns)`.
pub fn decode_patterns(bytes: &[u8]) -> Result<(u32, usize, usize, Vec<Vec<f64>>), PatternError> {
    if bytes.len() < 16 {
        return Err(PatternError::Format("short header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (m, w, h, kind) = (word(0), word(1), word(2), word(3) as u32);
    let payload = &bytes[16..];
    if payload.len() != m * w * h * 8 {
        return Err(PatternError::Format(format!(
            "payload of {} bytes for {m} patterns of {w}x{h}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let patterns = if w * h == 0 {
        vec![Vec::new(); m]
    } else {
        values.chunks_exact(w * h).map(<[f64]>::to_vec).collect()
    };
    Ok((kind, w, h, patterns))
}

/// Number of patterns for a rate: `max(1, round(rate * n_active))`.
pub fn pattern_count(sampling_rate: f64, n_active: usize) -> usize {
    ((sampling_rate * n_active as f64).round() as usize).max(1)
}

/// Seeded, row- and column-permuted binary Hadamard patterns over `mask`.
///
/// The Hadamard order is the smallest power of two covering the active
/// pixels. Row 0 (all ones) is always pattern 0; the remaining `m - 1`
/// patterns are the first rows of a random permutation of rows `1..2^n`.
/// Columns are randomly permuted and truncated to the active-pixel count,
/// and `-1` entries become 0.
pub fn build_hadamard_patterns(
    mask: &FovMask,
    sampling_rate: f64,
    seed: u64,
) -> Result<PatternSet, PatternError> {
    if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
        return Err(PatternError::SamplingRate(sampling_rate));
    }
    let n_active = mask.n_active();
    if n_active < 4 {
        return Err(PatternError::MaskEmpty(n_active));
    }
    let order_log2 = n_active.next_power_of_two().trailing_zeros();
    if order_log2 > PATTERN_ORDER_LIMIT {
        return Err(PatternError::OrderTooLarge {
            order: order_log2,
            limit: PATTERN_ORDER_LIMIT,
        });
    }
    let size = 1usize << order_log2;
    let m = pattern_count(sampling_rate, n_active);

    let mut row_pool: Vec<usize> = (1..size).collect();
    Rng::stream(seed, tags::PATTERN_ROWS).shuffle(&mut row_pool);
    let mut rows = Vec::with_capacity(m);
    rows.push(0);
    rows.extend_from_slice(&row_pool[..m - 1]);

    let mut cols: Vec<usize> = (0..size).collect();
    Rng::stream(seed, tags::PATTERN_COLS).shuffle(&mut cols);
    cols.truncate(n_active);

    Ok(PatternSet {
        kind: PatternKind::HadamardPermuted,
        mask: mask.clone(),
        seed,
        sampling_rate,
        len: m,
        storage: Storage::Hadamard {
            order_log2,
            rows,
            cols,
        },
    })
}

/// Convenience for `make_mask` followed by `build_hadamard_patterns`.
pub fn hadamard_patterns_for(
    field_w: usize,
    field_h: usize,
    strategy: FovStrategy,
    param: Option<usize>,
    sampling_rate: f64,
    seed: u64,
) -> Result<PatternSet, PatternError> {
    let mask = make_mask(strategy, field_w, field_h, param)?;
    build_hadamard_patterns(&mask, sampling_rate, seed)
}
