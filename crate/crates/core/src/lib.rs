//! Label-noise-robust text classification.
//!
//! The crate trains a small text classifier on noisily labeled data in three
//! stages: a cross-entropy warmup, a two-component beta-mixture fit over the
//! warmup losses that scores each sample's probability of being clean, and a
//! joint de-noising phase in which an auxiliary noise-model head learns the
//! label corruption while the classifier is steered toward samples believed
//! to be clean. Seeded noise-injection protocols (random, token-conditional,
//! length-conditional) make the whole pipeline reproducible end to end.

pub mod bmm;
pub mod data;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod synth;
pub mod training;
