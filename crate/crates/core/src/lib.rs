//! Scattering-enhanced single-pixel sensing and encryption.
//!
//! Pipeline stages, each in its own module: image ingestion
//! ([`datasets`]), seeded scattering surrogates ([`scattering`]), Hadamard
//! and learned modulation patterns ([`patterns`]), the single-pixel forward
//! model ([`measurement`]), image entropy ([`entropy`]), a trainable
//! measurement-domain classifier ([`decoder`]) and a statistical randomness
//! battery for ciphertext streams ([`nist`]).

pub mod datasets;
pub mod decoder;
pub mod entropy;
pub mod measurement;
pub mod nist;
pub mod patterns;
mod fft2;
pub mod rng;
pub mod scattering;

pub use datasets::{Image, LabeledDataset};
pub use decoder::{DecoderModel, TrainConfig};
pub use entropy::EntropyReport;
pub use rng::Rng;
pub use scattering::{ScatterConfig, ScatterFamily, ScatterOperator};
pub use measurement::Measurement;
pub use nist::{BitStream, TestResult};
pub use patterns::{FovMask, FovStrategy, PatternSet};
