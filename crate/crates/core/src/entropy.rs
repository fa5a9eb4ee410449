//! Shannon entropy of 8-bit images over a 256-bin histogram, in bits.

use thiserror::Error;

use crate::datasets::{Image, LabeledDataset};

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntropyError {
    #[error("entropy of an empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub per_image: Vec<f64>,
    pub mean: f64,
    pub histogram_bins: usize,
}

pub fn histogram(img: &Image) -> [u64; HISTOGRAM_BINS] {
    let mut hist = [0u64; HISTOGRAM_BINS];
    for &p in img.pixels() {
        hist[p as usize] += 1;
    }
    hist
}

/// `H = -sum P(l) log2 P(l)`; empty bins contribute nothing.
pub fn image_entropy(img: &Image) -> f64 {
    let total = img.len() as f64;
    let h: f64 = histogram(img)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum();
    // -0.0 for single-bin histograms
    h.max(0.0)
}

pub fn dataset_entropy(ds: &LabeledDataset) -> Result<EntropyReport, EntropyError> {
    entropy_report(ds.images())
}

pub fn entropy_report(images: &[Image]) -> Result<EntropyReport, EntropyError> {
    if images.is_empty() {
        return Err(EntropyError::EmptyDataset);
    }
    let per_image: Vec<f64> = images.iter().map(image_entropy).collect();
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    Ok(EntropyReport {
        per_image,
        mean,
        histogram_bins: HISTOGRAM_BINS,
    })
}
