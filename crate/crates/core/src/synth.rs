//! Seeded synthetic corpora in the TREC and AG-News file formats.
//!
//! The generators produce desk-scale classification data with a controllable
//! signal-to-filler ratio: each class owns a keyword pool, examples mix
//! own-class keywords with cross-class distractors and shared filler, and an
//! optional per-example unique token gives a model something to memorize.
//! They exist so benchmarks and tests can exercise the full pipeline without
//! shipping datasets.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TREC_LABELS;

/// Question words prepended to TREC-like examples (cased, as raw tokens).
pub const QUESTION_WORDS: [&str; 6] = ["How", "What", "Why", "Who", "When", "Where"];

#[derive(Debug, Clone)]
pub struct TrecLikeSpec {
    pub num_examples: usize,
    pub seed: u64,
    pub keywords_per_class: usize,
    pub filler_words: usize,
    /// Body length range (keywords + filler), excluding the question word
    /// and the unique token.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a body token is an own-class keyword.
    pub p_own: f64,
    /// Probability that a body token is a keyword of some other class.
    pub p_other: f64,
    /// Append a per-example unique token (memorization handle).
    pub unique_tokens: bool,
    /// First unique-token number; disjoint offsets keep train and test
    /// unique tokens from colliding.
    pub uid_start: usize,
}

impl Default for TrecLikeSpec {
    fn default() -> Self {
        TrecLikeSpec {
            num_examples: 5452,
            seed: 1,
            keywords_per_class: 30,
            filler_words: 150,
            min_tokens: 6,
            max_tokens: 12,
            p_own: 0.55,
            p_other: 0.15,
            unique_tokens: true,
            uid_start: 0,
        }
    }
}

fn keyword(class: usize, index: usize) -> String {
    format!("cls{class}kw{index:02}")
}

fn filler(index: usize) -> String {
    format!("fill{index:03}")
}

/// Generates TREC-format lines ("LABEL:fine text...").
pub fn generate_trec_like(spec: &TrecLikeSpec) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let num_classes = TREC_LABELS.len();
    let mut lines = Vec::with_capacity(spec.num_examples);
    for i in 0..spec.num_examples {
        let class = rng.random_range(0..num_classes);
        let mut tokens: Vec<String> = Vec::new();
        tokens.push(QUESTION_WORDS[rng.random_range(0..QUESTION_WORDS.len())].to_string());
        let body_len = rng.random_range(spec.min_tokens..=spec.max_tokens);
        for _ in 0..body_len {
            let r: f64 = rng.random_range(0.0..1.0);
            if r < spec.p_own {
                tokens.push(keyword(class, rng.random_range(0..spec.keywords_per_class)));
            } else if r < spec.p_own + spec.p_other {
                let other = (class + rng.random_range(1..num_classes)) % num_classes;
                tokens.push(keyword(other, rng.random_range(0..spec.keywords_per_class)));
            } else {
                tokens.push(filler(rng.random_range(0..spec.filler_words)));
            }
        }
        if spec.unique_tokens {
            tokens.push(format!("uid{:06}", spec.uid_start + i));
        }
        lines.push(format!("{}:synth {}", TREC_LABELS[class], tokens.join(" ")));
    }
    lines
}

pub fn write_trec_like<P: AsRef<Path>>(spec: &TrecLikeSpec, path: P) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in generate_trec_like(spec) {
        writeln!(out, "{line}")?;
    }
    out.flush()
}

#[derive(Debug, Clone)]
pub struct AgNewsLikeSpec {
    pub num_examples: usize,
    pub seed: u64,
    pub keywords_per_class: usize,
    pub filler_words: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Exact fraction of rows whose description carries the "AP" source
    /// token; disjoint from the Reuters rows.
    pub ap_fraction: f64,
    pub reuters_fraction: f64,
}

impl Default for AgNewsLikeSpec {
    fn default() -> Self {
        AgNewsLikeSpec {
            num_examples: 2000,
            seed: 1,
            keywords_per_class: 20,
            filler_words: 100,
            min_tokens: 8,
            max_tokens: 16,
            ap_fraction: 0.078,
            reuters_fraction: 0.108,
        }
    }
}

/// Generates AG-News-format CSV rows ("class,title,description"). Exactly
/// round(ap_fraction * N) rows contain the raw token "AP" and a disjoint
/// round(reuters_fraction * N) rows contain "Reuters".
pub fn generate_agnews_like(spec: &AgNewsLikeSpec) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_examples;
    let num_classes = 4usize;

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let ap_count = (spec.ap_fraction * n as f64).round() as usize;
    let reuters_count = (spec.reuters_fraction * n as f64).round() as usize;
    let mut source: Vec<Option<&str>> = vec![None; n];
    for &i in order.iter().take(ap_count) {
        source[i] = Some("AP");
    }
    for &i in order.iter().skip(ap_count).take(reuters_count) {
        source[i] = Some("Reuters");
    }

    let mut rows = Vec::with_capacity(n);
    for (i, src) in source.iter().enumerate() {
        let class = rng.random_range(0..num_classes);
        let title: Vec<String> = (0..rng.random_range(2..=4))
            .map(|_| keyword(class, rng.random_range(0..spec.keywords_per_class)))
            .collect();
        let mut desc: Vec<String> = Vec::new();
        if let Some(s) = src {
            desc.push(s.to_string());
            desc.push("-".to_string());
        }
        let body_len = rng.random_range(spec.min_tokens..=spec.max_tokens);
        for _ in 0..body_len {
            if rng.random_range(0.0..1.0) < 0.5 {
                desc.push(keyword(class, rng.random_range(0..spec.keywords_per_class)));
            } else {
                desc.push(filler(rng.random_range(0..spec.filler_words)));
            }
        }
        let _ = i;
        rows.push(format!(
            "{},\"{}\",\"{}\"",
            class + 1,
            title.join(" "),
            desc.join(" ")
        ));
    }
    rows
}

pub fn write_agnews_like<P: AsRef<Path>>(spec: &AgNewsLikeSpec, path: P) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in generate_agnews_like(spec) {
        writeln!(out, "{row}")?;
    }
    out.flush()
}
