//! Single-pixel forward model.
//!
//! `values[k] = sum_p pattern_k[p] * img[p] / n_active`: the bucket-detector
//! reading for each pattern, normalized by the modulated pixel count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::datasets::{Image, LabeledDataset};
use crate::patterns::{fwht, PatternSet, Storage};
use crate::rng::{tags, Rng};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("image is {found:?} but patterns cover {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("measurement file: {0}")]
    Format(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// One coupled measurement vector with the provenance needed to redo it.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub values: Vec<f64>,
    pub pattern_seed: u64,
    pub mask_descriptor: String,
    /// `m / n_active` as configured.
    pub sampling_rate: f64,
    pub n_active: usize,
    pub field_pixels: usize,
    pub label: Option<usize>,
}

impl Measurement {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `m` over the whole field rather than the modulated area.
    pub fn full_view_rate(&self) -> f64 {
        self.values.len() as f64 / self.field_pixels as f64
    }
}

fn check_dims(ps: &PatternSet, w: usize, h: usize) -> Result<(), MeasureError> {
    if ps.field_dims() != (w, h) {
        return Err(MeasureError::DimensionMismatch {
            expected: ps.field_dims(),
            found: (w, h),
        });
    }
    Ok(())
}

fn wrap(ps: &PatternSet, values: Vec<f64>, label: Option<usize>) -> Measurement {
    let (w, h) = ps.field_dims();
    Measurement {
        values,
        pattern_seed: ps.seed(),
        mask_descriptor: ps.mask().descriptor(),
        sampling_rate: ps.sampling_rate(),
        n_active: ps.mask().n_active(),
        field_pixels: w * h,
        label,
    }
}

pub fn measure(img: &Image, ps: &PatternSet) -> Result<Measurement, MeasureError> {
    check_dims(ps, img.width(), img.height())?;
    Ok(wrap(ps, measure_pixels(img.pixels(), ps), None))
}

fn measure_pixels(pixels: &[u8], ps: &PatternSet) -> Vec<f64> {
    let active = ps.mask().active();
    let n = active.len() as f64;
    match &ps.storage {
        Storage::Hadamard {
            order_log2,
            rows,
            cols,
        } => {
            // Integer transform: exact for 8-bit inputs at every supported order.
            let mut buf = vec![0i64; 1usize << order_log2];
            let mut total = 0i64;
            for (&p, &c) in active.iter().zip(cols) {
                let v = i64::from(pixels[p]);
                buf[c] = v;
                total += v;
            }
            fwht(&mut buf);
            rows.iter()
                .map(|&r| ((total + buf[r]) / 2) as f64 / n)
                .collect()
        }
        Storage::Dense(_) => {
            let x: Vec<f64> = active.iter().map(|&p| f64::from(pixels[p])).collect();
            dense_products(ps, &x, n)
        }
    }
}

fn dense_products(ps: &PatternSet, x: &[f64], n: f64) -> Vec<f64> {
    (0..ps.len())
        .map(|k| {
            ps.active_pattern(k)
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Forward model for a real-valued full-field raster.
pub fn measure_real(field: &[f64], ps: &PatternSet) -> Result<Vec<f64>, MeasureError> {
    let (w, h) = ps.field_dims();
    if field.len() != w * h {
        return Err(MeasureError::DimensionMismatch {
            expected: (w, h),
            found: (field.len(), 1),
        });
    }
    let active = ps.mask().active();
    let n = active.len() as f64;
    let x: Vec<f64> = active.iter().map(|&p| field[p]).collect();
    Ok(match &ps.storage {
        Storage::Hadamard {
            order_log2,
            rows,
            cols,
        } => {
            let mut buf = vec![0.0; 1usize << order_log2];
            for (&v, &c) in x.iter().zip(cols) {
                buf[c] = v;
            }
            let total: f64 = x.iter().sum();
            fwht(&mut buf);
            rows.iter().map(|&r| (total + buf[r]) / 2.0 / n).collect()
        }
        Storage::Dense(_) => dense_products(ps, &x, n),
    })
}

/// Measure every image; with `noise_snr_db` set, add zero-mean Gaussian
/// noise whose power is the vector's mean square over `10^(snr/10)`.
pub fn measure_dataset(
    ds: &LabeledDataset,
    ps: &PatternSet,
    noise_snr_db: Option<f64>,
    seed: u64,
) -> Result<Vec<Measurement>, MeasureError> {
    if let Some((w, h)) = ds.dims() {
        check_dims(ps, w, h)?;
    }
    let mut rng = Rng::stream(seed, tags::NOISE);
    ds.images()
        .iter()
        .zip(ds.labels())
        .map(|(img, &label)| {
            let mut values = measure_pixels(img.pixels(), ps);
            if let Some(snr) = noise_snr_db {
                add_noise(&mut values, snr, &mut rng);
            }
            Ok(wrap(ps, values, Some(label)))
        })
        .collect()
}

fn add_noise(values: &mut [f64], snr_db: f64, rng: &mut Rng) {
    let power = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    for v in values.iter_mut() {
        *v += sigma * rng.gaussian();
    }
}

/// CSV: one row per vector, `label` (empty when absent) then the values.
/// Floats use the shortest representation that parses back exactly.
pub fn to_csv(meas: &[Measurement]) -> String {
    let mut out = String::new();
    for m in meas {
        if let Some(l) = m.label {
            write!(out, "{l}").unwrap();
        }
        for v in &m.values {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parse the CSV written by [`to_csv`] into `(labels, vectors)`.
pub fn from_csv(text: &str) -> Result<(Vec<Option<usize>>, Vec<Vec<f64>>), MeasureError> {
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or("").trim();
        labels.push(if label.is_empty() {
            None
        } else {
            Some(label.parse().map_err(|_| {
                MeasureError::Format(format!("line {}: bad label {label:?}", line_no + 1))
            })?)
        });
        let row = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    MeasureError::Format(format!("line {}: bad value {f:?}", line_no + 1))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((labels, rows))
}

/// Binary: `count` and `m` as little-endian u32, then `count * m` little-endian f64.
pub fn to_binary(meas: &[Measurement]) -> Result<Vec<u8>, MeasureError> {
    let m = meas.first().map_or(0, Measurement::len);
    if meas.iter().any(|v| v.len() != m) {
        return Err(MeasureError::Format("vectors of unequal length".into()));
    }
    let mut out = Vec::with_capacity(8 + meas.len() * m * 8);
    out.extend_from_slice(&(meas.len() as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for v in meas.iter().flat_map(|x| &x.values) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_binary(bytes: &[u8]) -> Result<Vec<Vec<f64>>, MeasureError> {
    if bytes.len() < 8 {
        return Err(MeasureError::Format("short header".into()));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    if payload.len() != count * m * 8 {
        return Err(MeasureError::Format(format!(
            "{} payload bytes for {count} x {m}",
            payload.len()
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(if m == 0 {
        vec![Vec::new(); count]
    } else {
        flat.chunks_exact(m).map(<[f64]>::to_vec).collect()
    })
}

pub fn write_csv(meas: &[Measurement], path: &Path) -> Result<(), MeasureError> {
    fs::write(path, to_csv(meas))?;
    Ok(())
}

pub fn write_binary(meas: &[Measurement], path: &Path) -> Result<(), MeasureError> {
    fs::write(path, to_binary(meas)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{build_hadamard_patterns, make_mask, FovStrategy};
    use proptest::prelude::*;

    fn image(w: usize, h: usize, salt: usize) -> Image {
        Image::new(w, h, (0..w * h).map(|i| ((i * 29 + salt * 13) % 256) as u8).collect()).unwrap()
    }

    /// Direct inner products against materialized full-field patterns.
    fn brute_force(img: &Image, ps: &PatternSet) -> Vec<f64> {
        let n = ps.mask().n_active() as f64;
        (0..ps.len())
            .map(|k| {
                ps.pattern(k)
                    .iter()
                    .zip(img.pixels())
                    .map(|(p, &x)| p * f64::from(x))
                    .sum::<f64>()
                    / n
            })
            .collect()
    }

    #[test]
    fn flux_pattern_gives_mean_over_active_set() {
        let img = image(16, 16, 1);
        let mask = make_mask(FovStrategy::ACentral, 16, 16, Some(8)).unwrap();
        let ps = build_hadamard_patterns(&mask, 0.25, 5).unwrap();
        let m = measure(&img, &ps).unwrap();
        let mean = mask.active().iter().map(|&p| f64::from(img.pixels()[p])).sum::<f64>() / 64.0;
        assert_eq!(m.values[0], mean);
        assert_eq!(m.values.len(), 16);
        assert_eq!(m.n_active, 64);
        assert_eq!(m.full_view_rate(), 16.0 / 256.0);
    }

    #[test]
    fn zero_image_zero_vector() {
        let ps = build_hadamard_patterns(&make_mask(FovStrategy::Full, 8, 8, None).unwrap(), 0.5, 0).unwrap();
        let m = measure(&Image::filled(8, 8, 0).unwrap(), &ps).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_inner_product() {
        let img = Image::new(2, 2, vec![10, 20, 30, 40]).unwrap();
        let mask = make_mask(FovStrategy::Full, 2, 2, None).unwrap();
        let ps = PatternSet::learned(mask, vec![1.0, 0.0, 0.0, 1.0], 1, 0).unwrap();
        assert_eq!(measure(&img, &ps).unwrap().values, vec![12.5]);
    }

    #[test]
    fn fast_path_matches_brute_force_exactly() {
        for (strategy, param) in [
            (FovStrategy::Full, None),
            (FovStrategy::ACentral, Some(11)),
            (FovStrategy::BInterleaved, Some(7)),
        ] {
            let mask = make_mask(strategy, 24, 20, param).unwrap();
            let ps = build_hadamard_patterns(&mask, 0.6, 3).unwrap();
            let img = image(24, 20, 4);
            assert_eq!(measure(&img, &ps).unwrap().values, brute_force(&img, &ps));
            let real: Vec<f64> = img.pixels().iter().map(|&p| f64::from(p)).collect();
            for (a, b) in measure_real(&real, &ps).unwrap().iter().zip(brute_force(&img, &ps)) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let ps = build_hadamard_patterns(&make_mask(FovStrategy::Full, 8, 8, None).unwrap(), 0.5, 0).unwrap();
        assert!(matches!(
            measure(&image(8, 9, 0), &ps),
            Err(MeasureError::DimensionMismatch { .. })
        ));
    }

    fn small_dataset(n: usize, w: usize) -> LabeledDataset {
        let imgs = (0..n).map(|i| image(w, w, i)).collect();
        LabeledDataset::new(imgs, (0..n).map(|i| i % 10).collect(), 10).unwrap()
    }

    #[test]
    fn dataset_without_noise_is_pointwise() {
        let ds = small_dataset(5, 16);
        let ps = build_hadamard_patterns(&make_mask(FovStrategy::Full, 16, 16, None).unwrap(), 0.2, 9).unwrap();
        let out = measure_dataset(&ds, &ps, None, 0).unwrap();
        for (k, m) in out.iter().enumerate() {
            assert_eq!(m.values, measure(&ds.images()[k], &ps).unwrap().values);
            assert_eq!(m.label, Some(k % 10));
        }
    }

    #[test]
    fn noise_is_seeded() {
        let ds = small_dataset(4, 16);
        let ps = build_hadamard_patterns(&make_mask(FovStrategy::Full, 16, 16, None).unwrap(), 0.2, 9).unwrap();
        let a = measure_dataset(&ds, &ps, Some(40.0), 5).unwrap();
        let b = measure_dataset(&ds, &ps, Some(40.0), 5).unwrap();
        let c = measure_dataset(&ds, &ps, Some(40.0), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn empirical_snr_near_target() {
        let ds = small_dataset(100, 32);
        let ps = build_hadamard_patterns(&make_mask(FovStrategy::Full, 32, 32, None).unwrap(), 1.0, 2).unwrap();
        let clean = measure_dataset(&ds, &ps, None, 0).unwrap();
        let noisy = measure_dataset(&ds, &ps, Some(20.0), 1).unwrap();
        let mut total = 0.0;
        for (c, n) in clean.iter().zip(&noisy) {
            let sig: f64 = c.values.iter().map(|v| v * v).sum();
            let noise: f64 = c.values.iter().zip(&n.values).map(|(a, b)| (a - b).powi(2)).sum();
            let snr = 10.0 * (sig / noise).log10();
            assert!((snr - 20.0).abs() < 1.0, "snr {snr}");
            total += snr;
        }
        assert!((total / 100.0 - 20.0).abs() < 0.2);
    }

    #[test]
    fn file_formats_round_trip() {
        let ds = small_dataset(3, 8);
        let ps = build_hadamard_patterns(&make_mask(FovStrategy::Full, 8, 8, None).unwrap(), 0.3, 1).unwrap();
        let meas = measure_dataset(&ds, &ps, Some(30.0), 3).unwrap();
        let (labels, rows) = from_csv(&to_csv(&meas)).unwrap();
        assert_eq!(labels, vec![Some(0), Some(1), Some(2)]);
        for (r, m) in rows.iter().zip(&meas) {
            assert_eq!(r, &m.values);
        }
        let bin = to_binary(&meas).unwrap();
        assert_eq!(bin.len(), 8 + 3 * meas[0].len() * 8);
        let back = from_binary(&bin).unwrap();
        assert_eq!(back, rows);
    }

    proptest! {
        #[test]
        fn linear_in_the_image(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
            let mask = make_mask(FovStrategy::ACentral, 12, 12, Some(9)).unwrap();
            let ps = build_hadamard_patterns(&mask, 0.7, seed).unwrap();
            let x1: Vec<f64> = (0..144).map(|i| ((i * 31 + 7) % 97) as f64 * 0.37).collect();
            let x2: Vec<f64> = (0..144).map(|i| ((i * 17 + 3) % 89) as f64 - 40.0).collect();
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
            let y = measure_real(&mix, &ps).unwrap();
            let y1 = measure_real(&x1, &ps).unwrap();
            let y2 = measure_real(&x2, &ps).unwrap();
            for k in 0..y.len() {
                let want = a * y1[k] + b * y2[k];
                let scale = (a * y1[k]).abs() + (b * y2[k]).abs() + 1e-12;
                prop_assert!((y[k] - want).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn reordering_patterns_reorders_values(seed in any::<u64>(), rot in 0usize..50) {
            let mask = make_mask(FovStrategy::Full, 10, 10, None).unwrap();
            let ps = build_hadamard_patterns(&mask, 0.5, seed).unwrap();
            let mut order: Vec<usize> = (0..ps.len()).collect();
            order.rotate_left(rot % ps.len());
            order.swap(0, ps.len() - 1);
            let img = image(10, 10, seed as usize % 7);
            let base = measure(&img, &ps).unwrap().values;
            let re = measure(&img, &ps.reordered(&order)).unwrap().values;
            for (i, &k) in order.iter().enumerate() {
                prop_assert_eq!(re[i], base[k]);
            }
            prop_assert_eq!(base.len(), crate::patterns::pattern_count(0.5, 100));
        }
    }
}
