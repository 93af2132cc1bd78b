//! Seeded, reproducible label corruption: uniform random noise, noise
//! conditioned on trigger tokens, and noise conditioned on text length.
//! Original labels survive in the `clean_label` column for diagnostics only.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{tokenize_raw, Dataset, TSV_HEADER};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("need at least 2 classes to corrupt labels, got {0}")]
    TooFewClasses(usize),
    #[error("noise level {0} outside the valid range")]
    InvalidLevel(f64),
    #[error("trigger token list is empty")]
    EmptyTriggers,
    #[error("no samples match triggers")]
    NoTriggerMatch,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Random,
    TokenConditional,
    LengthConditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Any raw token equals any trigger (case-sensitive).
    Contains,
    /// The first raw token equals a trigger.
    StartsWith,
}

impl std::str::FromStr for MatchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "contains" => Ok(MatchMode::Contains),
            "starts_with" => Ok(MatchMode::StartsWith),
            other => Err(format!("unknown match mode {other:?}")),
        }
    }
}

/// Full description of one corruption pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Target noise fraction in [0, 1] (fraction of the eligible set).
    pub level: f64,
    #[serde(default)]
    pub trigger_tokens: Vec<String>,
    pub match_mode: MatchMode,
    pub seed: u64,
}

/// Diagnostics of one corruption pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseReport {
    pub selected_count: usize,
    pub flipped_count: usize,
    /// Flipped count over the full dataset size.
    pub realized_noise_fraction: f64,
    /// `[old][new]` counts over all examples; unselected examples land on
    /// the diagonal.
    pub per_class_flip_matrix: Vec<Vec<usize>>,
}

fn flip_selected(
    dataset: &Dataset,
    selected: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Dataset, NoiseReport) {
    let num_classes = dataset.num_classes;
    let mut noisy = dataset.clone();
    // Ascending index order keeps the RNG stream deterministic.
    debug_assert!(selected.windows(2).all(|w| w[0] < w[1]));
    for &idx in selected {
        let e = &mut noisy.examples[idx];
        let offset = rng.random_range(1..num_classes);
        e.noisy_label = (e.clean_label + offset) % num_classes;
    }
    let mut matrix = vec![vec![0usize; num_classes]; num_classes];
    for e in &noisy.examples {
        matrix[e.clean_label][e.noisy_label] += 1;
    }
    let report = NoiseReport {
        selected_count: selected.len(),
        flipped_count: selected.len(),
        realized_noise_fraction: selected.len() as f64 / dataset.len().max(1) as f64,
        per_class_flip_matrix: matrix,
    };
    (noisy, report)
}

/// Picks exactly round(level * |eligible|) indices from `eligible`, uniformly
/// without replacement.
fn select_exact(eligible: &[usize], level: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = (level * eligible.len() as f64).round() as usize;
    let mut pool = eligible.to_vec();
    for i in (1..pool.len()).rev() {
        let j = rng.random_range(0..=i);
        pool.swap(i, j);
    }
    let mut chosen = pool[..count].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Flips the labels of exactly round(level * N) examples chosen uniformly;
/// each corrupted label is drawn uniformly from the other classes.
pub fn inject_random(
    dataset: &Dataset,
    level: f64,
    seed: u64,
) -> Result<(Dataset, NoiseReport), NoiseError> {
    if dataset.num_classes < 2 {
        return Err(NoiseError::TooFewClasses(dataset.num_classes));
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(NoiseError::InvalidLevel(level));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<usize> = (0..dataset.len()).collect();
    let selected = select_exact(&eligible, level, &mut rng);
    Ok(flip_selected(dataset, &selected, &mut rng))
}

/// Flips round(level * |eligible|) examples among those whose raw tokens
/// match the triggers. Matching is case-sensitive on pre-lowercase tokens.
pub fn inject_token_conditional(
    dataset: &Dataset,
    trigger_tokens: &[String],
    match_mode: MatchMode,
    level: f64,
    seed: u64,
) -> Result<(Dataset, NoiseReport), NoiseError> {
    if dataset.num_classes < 2 {
        return Err(NoiseError::TooFewClasses(dataset.num_classes));
    }
    if trigger_tokens.is_empty() {
        return Err(NoiseError::EmptyTriggers);
    }
    if !(0.0..=1.0).contains(&level) {
        return Err(NoiseError::InvalidLevel(level));
    }
    let eligible: Vec<usize> = dataset
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            let raw = tokenize_raw(&e.text);
            match match_mode {
                MatchMode::Contains => raw.iter().any(|t| trigger_tokens.iter().any(|g| g == t)),
                MatchMode::StartsWith => raw
                    .first()
                    .is_some_and(|t| trigger_tokens.iter().any(|g| g == t)),
            }
        })
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(NoiseError::NoTriggerMatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected = select_exact(&eligible, level, &mut rng);
    Ok(flip_selected(dataset, &selected, &mut rng))
}

/// Flips the labels of the longest round(fraction * N) examples by token
/// count, ties broken by ascending id.
pub fn inject_length_conditional(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, NoiseReport), NoiseError> {
    if dataset.num_classes < 2 {
        return Err(NoiseError::TooFewClasses(dataset.num_classes));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(NoiseError::InvalidLevel(fraction));
    }
    let mut by_length: Vec<usize> = (0..dataset.len()).collect();
    by_length.sort_by(|&a, &b| {
        let (ea, eb) = (&dataset.examples[a], &dataset.examples[b]);
        eb.text_length()
            .cmp(&ea.text_length())
            .then_with(|| ea.id.cmp(&eb.id))
    });
    let count = (fraction * dataset.len() as f64).round() as usize;
    let mut selected: Vec<usize> = by_length[..count].to_vec();
    selected.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(flip_selected(dataset, &selected, &mut rng))
}

/// Applies whichever protocol `spec` describes.
pub fn inject(dataset: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, NoiseReport), NoiseError> {
    match spec.kind {
        NoiseKind::Random => inject_random(dataset, spec.level, spec.seed),
        NoiseKind::TokenConditional => inject_token_conditional(
            dataset,
            &spec.trigger_tokens,
            spec.match_mode,
            spec.level,
            spec.seed,
        ),
        NoiseKind::LengthConditional => inject_length_conditional(dataset, spec.level, spec.seed),
    }
}

/// Writes the internal TSV format (`id\tnoisy_label\tclean_label\ttext`).
/// Output is byte-identical for identical datasets.
pub fn write_noisy_dataset<P: AsRef<Path>>(dataset: &Dataset, path: P) -> Result<(), NoiseError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{TSV_HEADER}")?;
    for e in &dataset.examples {
        writeln!(out, "{}\t{}\t{}\t{}", e.id, e.noisy_label, e.clean_label, e.text)?;
    }
    out.flush()?;
    Ok(())
}
