//! Seeded scattering surrogates.
//!
//! Three operator families stand in for a physical diffuser. Each one mixes
//! light from a neighborhood of every pixel into that pixel, and its spatial
//! reach grows with `strength`:
//!
//! * `MonteLike`: an isotropic speckle point-spread function. A circular pupil
//!   of radius `r = max(1, round(strength * kernel_max_radius))` frequency
//!   bins is filled with uniform random phase on a `(2R+1)^2` grid
//!   (`R = kernel_max_radius`). The intensity of its inverse FFT is centered,
//!   restricted to the disk of radius `r` and normalized. Larger `r` gives a
//!   finer and wider speckle.
//! * `ScatnetLike`: `k = max(1, round(strength * 64))` Gaussian blobs
//!   (sigma 1.5 px) at random positions inside the disk of radius `r` (same
//!   `r` as above), summed and normalized.
//! * `TransferMatrix`: an `N x N` (`N = width * height`) nonnegative random
//!   matrix with a circular band of half-width `round(strength * N / 4)`
//!   around the diagonal, rows normalized to 1.
//!
//! Strength 0 is the identity in every family. Kernels act by circular
//! convolution; the result is affinely rescaled to `[0, 255]` and rounded
//! half up.

use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{DatasetError, Image, LabeledDataset};
use crate::fft2::Fft2;
use crate::rng::{tags, Rng};

/// Blob width of the ScatNet-like kernel, in pixels.
pub const BLOB_SIGMA: f64 = 1.5;
/// Blob count at strength 1.
pub const MAX_BLOBS: f64 = 64.0;
/// Upper bound on stored transfer-matrix entries.
pub const MAX_TRANSFER_ENTRIES: usize = 1 << 27;
/// Binary export format version.
pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScatterError {
    #[error("strength {0} outside [0, 1]")]
    Strength(f64),
    #[error("kernel_max_radius must be at least 1")]
    KernelRadius,
    #[error("operator built for {expected:?}, image is {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("transfer matrix for {0} pixels with band {1} is too large to store")]
    OperatorTooLarge(usize, usize),
    #[error("malformed operator file: {0}")]
    Format(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterFamily {
    MonteLike,
    ScatnetLike,
    TransferMatrix,
}

impl ScatterFamily {
    pub fn tag(self) -> u32 {
        match self {
            Self::MonteLike => 1,
            Self::ScatnetLike => 2,
            Self::TransferMatrix => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            1 => Some(Self::MonteLike),
            2 => Some(Self::ScatnetLike),
            3 => Some(Self::TransferMatrix),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::MonteLike => "monte_like",
            Self::ScatnetLike => "scatnet_like",
            Self::TransferMatrix => "transfer_matrix",
        }
    }
}

impl std::str::FromStr for ScatterFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "monte_like" | "monte" => Ok(Self::MonteLike),
            "scatnet_like" | "scatnet" => Ok(Self::ScatnetLike),
            "transfer_matrix" | "transfer" => Ok(Self::TransferMatrix),
            _ => Err(format!("unknown scatter family {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterConfig {
    pub family: ScatterFamily,
    pub strength: f64,
    pub seed: u64,
    /// Defaults to a quarter of the image width.
    pub kernel_max_radius: Option<usize>,
}

impl ScatterConfig {
    pub fn new(family: ScatterFamily, strength: f64, seed: u64) -> Result<Self, ScatterError> {
        let cfg = Self {
            family,
            strength,
            seed,
            kernel_max_radius: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_kernel_max_radius(mut self, radius: usize) -> Result<Self, ScatterError> {
        self.kernel_max_radius = Some(radius);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ScatterError> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(ScatterError::Strength(self.strength));
        }
        if self.kernel_max_radius == Some(0) {
            return Err(ScatterError::KernelRadius);
        }
        Ok(())
    }

    pub fn max_radius_for(&self, width: usize) -> usize {
        self.kernel_max_radius.unwrap_or((width / 4).max(1))
    }

    /// Spatial reach `max(1, round(strength * max_radius))`; 0 at zero strength.
    pub fn support_radius(&self, width: usize) -> usize {
        if self.strength == 0.0 {
            return 0;
        }
        ((self.strength * self.max_radius_for(width) as f64).round() as usize).max(1)
    }
}

/// Point-spread function on a `(2 radius + 1)^2` grid centered at `(radius, radius)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    radius: usize,
    values: Vec<f64>,
}

impl Kernel {
    pub fn delta() -> Self {
        Self {
            radius: 0,
            values: vec![1.0],
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Weight at offset `(dx, dy)` from the center.
    pub fn at(&self, dx: isize, dy: isize) -> f64 {
        let r = self.radius as isize;
        if dx.abs() > r || dy.abs() > r {
            return 0.0;
        }
        self.values[((dy + r) as usize) * self.side() + (dx + r) as usize]
    }

    pub fn is_delta(&self) -> bool {
        self.radius == 0
    }
}

/// Circularly banded row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrix {
    n: usize,
    half_width: usize,
    /// `n` rows of `band_len` entries; entry `t` of row `i` sits in column
    /// `(i + n - half_width + t) mod n`, or column `t` when the band is full.
    rows: Vec<f64>,
    band_len: usize,
}

impl TransferMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn half_width(&self) -> usize {
        self.half_width
    }

    fn is_full(&self) -> bool {
        self.band_len == self.n
    }

    fn column(&self, row: usize, t: usize) -> usize {
        if self.is_full() {
            t
        } else {
            (row + self.n - self.half_width % self.n + t) % self.n
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows[i * self.band_len..(i + 1) * self.band_len]
            .iter()
            .enumerate()
            .map(move |(t, &v)| (self.column(i, t), v))
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i * self.band_len..(i + 1) * self.band_len].iter().sum()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[i * self.n + j] += v;
            }
        }
        out
    }
}

#[derive(Debug)]
enum Transform {
    Identity(Kernel),
    Convolution {
        kernel: Kernel,
        spectrum: Vec<Complex64>,
        fft: Fft2,
    },
    Matrix(TransferMatrix),
}

/// A scattering transform bound to one image size.
#[derive(Debug)]
pub struct ScatterOperator {
    config: ScatterConfig,
    width: usize,
    height: usize,
    transform: Transform,
}

impl ScatterOperator {
    pub fn config(&self) -> &ScatterConfig {
        &self.config
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.transform, Transform::Identity(_))
    }

    /// Kernel of the convolution families; the delta for the identity.
    pub fn kernel(&self) -> Option<&Kernel> {
        match &self.transform {
            Transform::Convolution { kernel, .. } => Some(kernel),
            Transform::Identity(delta) if self.config.family != ScatterFamily::TransferMatrix => {
                Some(delta)
            }
            _ => None,
        }
    }

    pub fn matrix(&self) -> Option<&TransferMatrix> {
        match &self.transform {
            Transform::Matrix(m) => Some(m),
            _ => None,
        }
    }
}

pub fn build_operator(
    cfg: &ScatterConfig,
    width: usize,
    height: usize,
) -> Result<ScatterOperator, ScatterError> {
    cfg.validate()?;
    if width == 0 || height == 0 {
        return Err(DatasetError::ZeroDimension { width, height }.into());
    }
    let transform = if cfg.strength == 0.0 {
        Transform::Identity(Kernel::delta())
    } else {
        let mut rng = Rng::stream(cfg.seed, tags::SCATTER);
        match cfg.family {
            ScatterFamily::MonteLike | ScatterFamily::ScatnetLike => {
                let kernel = if cfg.family == ScatterFamily::MonteLike {
                    speckle_kernel(cfg.max_radius_for(width), cfg.support_radius(width), &mut rng)
                } else {
                    blob_kernel(
                        cfg.support_radius(width),
                        ((cfg.strength * MAX_BLOBS).round() as usize).max(1),
                        &mut rng,
                    )
                };
                let fft = Fft2::new(width, height);
                let spectrum = kernel_spectrum(&kernel, width, height, &fft);
                Transform::Convolution {
                    kernel,
                    spectrum,
                    fft,
                }
            }
            ScatterFamily::TransferMatrix => {
                Transform::Matrix(banded_matrix(width * height, cfg.strength, &mut rng)?)
            }
        }
    };
    Ok(ScatterOperator {
        config: *cfg,
        width,
        height,
        transform,
    })
}

fn speckle_kernel(max_radius: usize, support: usize, rng: &mut Rng) -> Kernel {
    let side = 2 * max_radius + 1;
    let fft = Fft2::new(side, side);
    let pupil = (support * support) as isize;
    let signed = |i: usize| -> isize {
        if i <= side / 2 {
            i as isize
        } else {
            i as isize - side as isize
        }
    };
    let mut field = vec![Complex64::default(); side * side];
    for v in 0..side {
        for u in 0..side {
            let (fu, fv) = (signed(u), signed(v));
            // Draw for every bin so the phase screen does not depend on the pupil.
            let phase = rng.next_f64() * std::f64::consts::TAU;
            if fu * fu + fv * fv <= pupil {
                field[v * side + u] = Complex64::from_polar(1.0, phase);
            }
        }
    }
    fft.inverse(&mut field);

    let r = support as isize;
    let out_side = 2 * support + 1;
    let mut values = vec![0.0; out_side * out_side];
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let sy = dy.rem_euclid(side as isize) as usize;
            let sx = dx.rem_euclid(side as isize) as usize;
            values[((dy + r) as usize) * out_side + (dx + r) as usize] =
                field[sy * side + sx].norm_sqr();
        }
    }
    normalize(support, values)
}

fn blob_kernel(support: usize, blobs: usize, rng: &mut Rng) -> Kernel {
    let r = support as f64;
    let centers: Vec<(f64, f64)> = (0..blobs)
        .map(|_| {
            let rho = r * rng.next_f64().sqrt();
            let theta = rng.next_f64() * std::f64::consts::TAU;
            (rho * theta.cos(), rho * theta.sin())
        })
        .collect();
    let ri = support as isize;
    let side = 2 * support + 1;
    let denom = 2.0 * BLOB_SIGMA * BLOB_SIGMA;
    let mut values = vec![0.0; side * side];
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            values[((dy + ri) as usize) * side + (dx + ri) as usize] = centers
                .iter()
                .map(|&(cx, cy)| {
                    let d2 = (dx as f64 - cx).powi(2) + (dy as f64 - cy).powi(2);
                    (-d2 / denom).exp()
                })
                .sum();
        }
    }
    normalize(support, values)
}

fn normalize(radius: usize, mut values: Vec<f64>) -> Kernel {
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        values.iter_mut().for_each(|v| *v /= total);
    } else {
        values.fill(0.0);
        let mid = values.len() / 2;
        values[mid] = 1.0;
    }
    Kernel { radius, values }
}

fn kernel_spectrum(kernel: &Kernel, width: usize, height: usize, fft: &Fft2) -> Vec<Complex64> {
    let mut buf = vec![Complex64::default(); width * height];
    let r = kernel.radius as isize;
    for dy in -r..=r {
        for dx in -r..=r {
            let y = dy.rem_euclid(height as isize) as usize;
            let x = dx.rem_euclid(width as isize) as usize;
            buf[y * width + x].re += kernel.at(dx, dy);
        }
    }
    fft.forward(&mut buf);
    buf
}

fn banded_matrix(n: usize, strength: f64, rng: &mut Rng) -> Result<TransferMatrix, ScatterError> {
    let half_width = (strength * n as f64 / 4.0).round() as usize;
    let band_len = (2 * half_width + 1).min(n);
    if n.saturating_mul(band_len) > MAX_TRANSFER_ENTRIES {
        return Err(ScatterError::OperatorTooLarge(n, half_width));
    }
    let mut rows = Vec::with_capacity(n * band_len);
    for _ in 0..n {
        // (0, 1] keeps every band entry strictly positive
        let row: Vec<f64> = (0..band_len).map(|_| 1.0 - rng.next_f64()).collect();
        let s: f64 = row.iter().sum();
        rows.extend(row.into_iter().map(|v| v / s));
    }
    Ok(TransferMatrix {
        n,
        half_width,
        rows,
        band_len,
    })
}

fn check_dims(op: &ScatterOperator, img: &Image) -> Result<(), ScatterError> {
    let found = (img.width(), img.height());
    if found != op.dims() {
        return Err(ScatterError::DimensionMismatch {
            expected: op.dims(),
            found,
        });
    }
    Ok(())
}

/// Scattered intensities before rescaling to 8 bits.
pub fn scatter_real(op: &ScatterOperator, img: &Image) -> Result<Vec<f64>, ScatterError> {
    check_dims(op, img)?;
    let x: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    Ok(apply_real(op, &x))
}

/// Apply the operator to a real-valued field of the operator's dimensions.
pub fn apply_real(op: &ScatterOperator, x: &[f64]) -> Vec<f64> {
    match &op.transform {
        Transform::Identity(_) => x.to_vec(),
        Transform::Matrix(m) => m.apply(x),
        Transform::Convolution { spectrum, fft, .. } => {
            let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.forward(&mut buf);
            buf.iter_mut().zip(spectrum).for_each(|(a, k)| *a *= k);
            fft.inverse(&mut buf);
            buf.iter().map(|c| c.re).collect()
        }
    }
}

/// Affine map of `[min, max]` onto `[0, 255]` with round-half-up.
/// A flat field is rounded and clamped instead.
pub fn rescale_to_u8(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if !(span > 1e-9 * hi.abs().max(1.0)) {
        return values
            .iter()
            .map(|&v| (v + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect();
    }
    values
        .iter()
        .map(|&v| ((v - lo) / span * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

pub fn scatter(op: &ScatterOperator, img: &Image) -> Result<Image, ScatterError> {
    check_dims(op, img)?;
    if op.is_identity() {
        return Ok(img.clone());
    }
    let real = scatter_real(op, img)?;
    Ok(Image::new(img.width(), img.height(), rescale_to_u8(&real))?)
}

pub fn scatter_dataset(
    op: &ScatterOperator,
    ds: &LabeledDataset,
) -> Result<LabeledDataset, ScatterError> {
    ds.map_images(|im| scatter(op, im))
}

/// Kernel (or transfer matrix) rescaled by its maximum for viewing.
pub fn operator_image(op: &ScatterOperator) -> Image {
    let (values, side_w, side_h) = match (&op.transform, op.matrix()) {
        (Transform::Matrix(_), Some(m)) => (m.to_dense(), m.n, m.n),
        _ => {
            let k = op.kernel().filter(|k| !k.is_delta()).cloned().unwrap_or_else(Kernel::delta);
            let s = k.side();
            (k.values, s, s)
        }
    };
    let max = values.iter().cloned().fold(0.0, f64::max);
    let px = values
        .iter()
        .map(|&v| if max > 0.0 { (v / max * 255.0 + 0.5).floor() as u8 } else { 0 })
        .collect();
    Image::new(side_w, side_h, px).expect("operator dims are positive")
}

/// Flat export: 16-byte header (rows, cols, family tag, version as
/// little-endian u32) followed by `rows * cols` little-endian f64.
pub fn encode_operator(op: &ScatterOperator) -> Vec<u8> {
    let (values, rows, cols) = match op.matrix() {
        Some(m) => (m.to_dense(), m.n, m.n),
        None => {
            let k = op.kernel().filter(|k| !k.is_delta()).cloned().unwrap_or_else(Kernel::delta);
            let s = k.side();
            (k.values, s, s)
        }
    };
    let mut out = Vec::with_capacity(16 + values.len() * 8);
    for field in [rows as u32, cols as u32, op.config.family.tag(), EXPORT_VERSION] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decoded operator export: `(family, rows, cols, values)`.
pub fn decode_operator(bytes: &[u8]) -> Result<(ScatterFamily, usize, usize, Vec<f64>), ScatterError> {
    if bytes.len() < 16 {
        return Err(ScatterError::Format("short header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (rows, cols) = (word(0) as usize, word(1) as usize);
    let family = ScatterFamily::from_tag(word(2))
        .ok_or_else(|| ScatterError::Format(format!("family tag {}", word(2))))?;
    if word(3) != EXPORT_VERSION {
        return Err(ScatterError::Format(format!("version {}", word(3))));
    }
    let payload = &bytes[16..];
    if payload.len() != rows * cols * 8 {
        return Err(ScatterError::Format(format!(
            "payload {} bytes for {rows}x{cols}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((family, rows, cols, values))
}

pub fn write_operator(op: &ScatterOperator, path: &Path) -> Result<(), ScatterError> {
    fs::write(path, encode_operator(op))?;
    Ok(())
}
