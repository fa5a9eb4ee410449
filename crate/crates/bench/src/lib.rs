//! Shared inputs for the criterion benches.

use scatsense::{Image, Rng};

/// Deterministic image with a bright disc on noise, roughly digit-like
/// in its histogram.
pub fn test_image(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = Rng::new(seed);
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let r2 = (width.min(height) as f64 / 3.0).powi(2);
    let pixels = (0..width * height)
        .map(|i| {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            if (x - cx).powi(2) + (y - cy).powi(2) < r2 {
                200 + rng.below(56) as u8
            } else {
                rng.below(8) as u8
            }
        })
        .collect();
    Image::new(width, height, pixels).expect("nonzero dims")
}

/// Uniform random bits from the crate's generator.
pub fn random_bits(n: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (rng.next_u64() >> 63) as u8).collect()
}
