//! Dataset ingestion (TREC, AG-News, and the internal noisy TSV format),
//! tokenization, vocabulary construction, and optional pretrained word
//! embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("validation fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("split would leave {side} side empty")]
    EmptySplit { side: &'static str },
    #[error("embedding line for token {token:?} has {got} values, expected {expected}")]
    EmbeddingDim {
        token: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate example id {0}")]
    DuplicateId(usize),
}

/// Reserved unknown-word token; always id 0.
pub const UNK_TOKEN: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Header of the internal noisy-dataset TSV format.
pub const TSV_HEADER: &str = "id\tnoisy_label\tclean_label\ttext";

/// Coarse TREC question classes, id order.
pub const TREC_LABELS: [&str; 6] = ["ABBR", "DESC", "ENTY", "HUM", "LOC", "NUM"];

pub const AGNEWS_LABELS: [&str; 4] = ["World", "Sports", "Business", "Sci/Tech"];

fn strip_punct(token: &str) -> &str {
    // The reserved UNK symbol passes through untouched so that tokenize is
    // idempotent on its own output.
    if token == UNK_TOKEN {
        return token;
    }
    let stripped = token.trim_matches(|c: char| c.is_ascii_punctuation());
    // All-punctuation tokens ("-", "''") are kept whole.
    if stripped.is_empty() {
        token
    } else {
        stripped
    }
}

/// Lowercase, split on Unicode whitespace, strip leading/trailing punctuation
/// per token. Empty input tokenizes to the single UNK token.
pub fn tokenize(text: &str) -> Vec<String> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|t| strip_punct(t).to_lowercase())
        .collect();
    if tokens.is_empty() {
        vec![UNK_TOKEN.to_string()]
    } else {
        tokens
    }
}

/// Case-preserving variant of [`tokenize`]; noise triggers match against
/// these tokens so that cased words like "AP" keep their case.
pub fn tokenize_raw(text: &str) -> Vec<String> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .map(|t| strip_punct(t).to_string())
        .collect();
    if tokens.is_empty() {
        vec![UNK_TOKEN.to_string()]
    } else {
        tokens
    }
}

/// Token-to-id map with UNK reserved at id 0. Ids are assigned in descending
/// train-split frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    map: HashMap<String, usize>,
    tokens: Vec<String>,
    min_freq: usize,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> usize {
        self.map.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.map.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Id-ordered token list.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Rebuild a vocab from an explicit id-ordered token list (checkpoint
    /// loading). `tokens[0]` must be the UNK token.
    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        debug_assert_eq!(tokens.first().map(String::as_str), Some(UNK_TOKEN));
        let map = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            map,
            tokens,
            min_freq,
        }
    }
}

/// Builds a vocabulary from train-split texts. Tokens seen fewer than
/// `min_freq` times map to UNK.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocab, DataError> {
    assert!(min_freq >= 1, "min_freq must be at least 1");
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for token in tokenize(text.as_ref()) {
            if token != UNK_TOKEN {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens = Vec::with_capacity(kept.len() + 1);
    tokens.push(UNK_TOKEN.to_string());
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Ok(Vocab::from_tokens(tokens, min_freq))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Trec,
    AgNews,
    Tsv,
}

impl std::str::FromStr for DataFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trec" => Ok(DataFormat::Trec),
            "agnews" => Ok(DataFormat::AgNews),
            "tsv" => Ok(DataFormat::Tsv),
            other => Err(format!("unknown data format {other:?}")),
        }
    }
}

impl std::fmt::Display for DataFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataFormat::Trec => "trec",
            DataFormat::AgNews => "agnews",
            DataFormat::Tsv => "tsv",
        })
    }
}

/// One labeled text example. `clean_label` is diagnostic only; the training
/// path must never read it.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub noisy_label: usize,
    pub clean_label: usize,
    pub text: String,
}

impl Example {
    pub fn text_length(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub vocab: Arc<Vocab>,
    pub split: Split,
    pub label_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Assembles a dataset from raw rows, building its own vocabulary from
    /// the row texts.
    pub fn from_rows(
        rows: Vec<(usize, usize, usize, String)>,
        num_classes: usize,
        split: Split,
        label_names: Option<Vec<String>>,
        min_freq: usize,
    ) -> Result<Dataset, DataError> {
        let texts: Vec<&str> = rows.iter().map(|r| r.3.as_str()).collect();
        let vocab = Arc::new(build_vocab(&texts, min_freq)?);
        let mut seen = HashMap::new();
        let examples = rows
            .into_iter()
            .map(|(id, noisy, clean, text)| {
                if seen.insert(id, ()).is_some() {
                    return Err(DataError::DuplicateId(id));
                }
                Ok(Example {
                    id,
                    tokens: vocab.encode(&text),
                    noisy_label: noisy,
                    clean_label: clean,
                    text,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset {
            examples,
            num_classes,
            vocab,
            split,
            label_names,
        })
    }

    /// Re-tokenizes every example under `vocab` (used to apply the train
    /// vocabulary to validation/test splits).
    pub fn with_vocab(&self, vocab: Arc<Vocab>) -> Dataset {
        let examples = self
            .examples
            .iter()
            .map(|e| Example {
                id: e.id,
                tokens: vocab.encode(&e.text),
                noisy_label: e.noisy_label,
                clean_label: e.clean_label,
                text: e.text.clone(),
            })
            .collect();
        Dataset {
            examples,
            num_classes: self.num_classes,
            vocab,
            split: self.split,
            label_names: self.label_names.clone(),
        }
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split = split;
        self
    }

    /// Checks the structural invariants (label range, token-id range,
    /// non-empty token sequences).
    pub fn validate(&self) -> Result<(), DataError> {
        for e in &self.examples {
            if e.noisy_label >= self.num_classes || e.clean_label >= self.num_classes {
                return Err(DataError::Malformed {
                    line: e.id,
                    reason: format!(
                        "label out of range: noisy={} clean={} num_classes={}",
                        e.noisy_label, e.clean_label, self.num_classes
                    ),
                });
            }
            if e.tokens.is_empty() {
                return Err(DataError::Malformed {
                    line: e.id,
                    reason: "empty token sequence".to_string(),
                });
            }
            if e.tokens.iter().any(|&t| t >= self.vocab.len()) {
                return Err(DataError::Malformed {
                    line: e.id,
                    reason: "token id out of vocab range".to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Loads a dataset file. TREC and AG-News files are clean sources
/// (clean_label = noisy_label); the TSV format is the artifact's own noisy
/// format written by the noise module.
pub fn load_dataset<P: AsRef<Path>>(
    path: P,
    format: DataFormat,
    split: Split,
) -> Result<Dataset, DataError> {
    match format {
        DataFormat::Trec => load_trec(path.as_ref(), split),
        DataFormat::AgNews => load_agnews(path.as_ref(), split),
        DataFormat::Tsv => load_tsv(path.as_ref(), split),
    }
}

fn load_trec(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let (tag, text) = line.split_once(char::is_whitespace).ok_or_else(|| {
            DataError::Malformed {
                line: lineno,
                reason: "expected \"LABEL:fine text...\"".to_string(),
            }
        })?;
        let coarse = tag
            .split_once(':')
            .map(|(c, _)| c)
            .ok_or_else(|| DataError::Malformed {
                line: lineno,
                reason: format!("label tag {tag:?} has no colon"),
            })?;
        let label = TREC_LABELS
            .iter()
            .position(|&l| l == coarse)
            .ok_or_else(|| DataError::UnknownLabel {
                line: lineno,
                label: coarse.to_string(),
            })?;
        rows.push((idx, label, label, text.to_string()));
    }
    Dataset::from_rows(
        rows,
        TREC_LABELS.len(),
        split,
        Some(TREC_LABELS.iter().map(|s| s.to_string()).collect()),
        1,
    )
}

fn load_agnews(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => DataError::Malformed {
                line: 0,
                reason: format!("cannot open {}: {e}", path.display()),
            },
            _ => DataError::Malformed {
                line: 0,
                reason: e.to_string(),
            },
        })?;
    let mut rows = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let lineno = idx + 1;
        let record = record.map_err(|e| DataError::Malformed {
            line: lineno,
            reason: e.to_string(),
        })?;
        if record.len() != 3 {
            return Err(DataError::Malformed {
                line: lineno,
                reason: format!("expected 3 CSV fields, got {}", record.len()),
            });
        }
        let class: usize = record[0].trim().parse().map_err(|_| DataError::UnknownLabel {
            line: lineno,
            label: record[0].to_string(),
        })?;
        if !(1..=4).contains(&class) {
            return Err(DataError::UnknownLabel {
                line: lineno,
                label: record[0].to_string(),
            });
        }
        let mut text = format!("{} {}", &record[1], &record[2]);
        // Quoted CSV fields may embed line breaks; the TSV format cannot.
        if text.contains('\n') || text.contains('\r') {
            text = text.replace(['\n', '\r'], " ");
        }
        rows.push((idx, class - 1, class - 1, text));
    }
    Dataset::from_rows(
        rows,
        AGNEWS_LABELS.len(),
        split,
        Some(AGNEWS_LABELS.iter().map(|s| s.to_string()).collect()),
        1,
    )
}

fn load_tsv(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(header)) if header == TSV_HEADER => {}
        Some(Ok(other)) => {
            return Err(DataError::Malformed {
                line: 1,
                reason: format!("bad TSV header {other:?}"),
            })
        }
        Some(Err(e)) => return Err(e.into()),
        None => return Err(DataError::EmptyCorpus),
    }
    let mut rows = Vec::new();
    let mut max_label = 0usize;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        let mut parts = line.splitn(4, '\t');
        let parse_field = |part: Option<&str>, what: &str| -> Result<usize, DataError> {
            part.and_then(|p| p.parse().ok())
                .ok_or_else(|| DataError::Malformed {
                    line: lineno,
                    reason: format!("missing or non-numeric {what}"),
                })
        };
        let id = parse_field(parts.next(), "id")?;
        let noisy = parse_field(parts.next(), "noisy_label")?;
        let clean = parse_field(parts.next(), "clean_label")?;
        let text = parts
            .next()
            .ok_or_else(|| DataError::Malformed {
                line: lineno,
                reason: "missing text column".to_string(),
            })?
            .to_string();
        max_label = max_label.max(noisy).max(clean);
        rows.push((id, noisy, clean, text));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Dataset::from_rows(rows, max_label + 1, split, None, 1)
}

/// Deterministic seeded shuffle-and-carve of a validation split. Both halves
/// retain their original ids; the train vocabulary is rebuilt from the train
/// half only and applied to both.
pub fn split_validation(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidFraction(fraction));
    }
    let n = dataset.len();
    let n_val = (fraction * n as f64).round() as usize;
    if n_val == 0 {
        return Err(DataError::EmptySplit { side: "validation" });
    }
    if n_val >= n {
        return Err(DataError::EmptySplit { side: "train" });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates; first n_val shuffled positions become the validation set.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut val_idx: Vec<usize> = order[..n_val].to_vec();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();

    let take = |idx: &[usize], split: Split| -> Dataset {
        Dataset {
            examples: idx.iter().map(|&i| dataset.examples[i].clone()).collect(),
            num_classes: dataset.num_classes,
            vocab: Arc::clone(&dataset.vocab),
            split,
            label_names: dataset.label_names.clone(),
        }
    };
    let train = take(&train_idx, Split::Train);
    let val = take(&val_idx, Split::Validation);

    let train_texts: Vec<&str> = train.examples.iter().map(|e| e.text.as_str()).collect();
    let vocab = Arc::new(build_vocab(&train_texts, dataset.vocab.min_freq())?);
    Ok((train.with_vocab(Arc::clone(&vocab)), val.with_vocab(vocab)))
}

/// Loads pretrained word vectors ("token v1 v2 ... vdim" per line) into a
/// vocab-indexed matrix. Tokens absent from the file (and UNK) are filled
/// uniformly in [-0.1, 0.1] from `rng`. Returns the matrix and the number of
/// vocabulary rows covered by the file.
pub fn load_embeddings<P: AsRef<Path>, R: Rng>(
    path: P,
    vocab: &Vocab,
    dim: usize,
    rng: &mut R,
) -> Result<(Matrix, usize), DataError> {
    let reader = BufReader::new(File::open(path.as_ref())?);
    let mut pretrained: HashMap<String, Vec<f64>> = HashMap::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = match parts.next() {
            Some(t) => t.to_string(),
            None => continue,
        };
        let values: Vec<f64> = parts.map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        if values.len() != dim || values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::EmbeddingDim {
                token,
                expected: dim,
                got: values.len(),
            });
        }
        pretrained.insert(token, values);
    }
    let mut matrix = Matrix::zeros(vocab.len(), dim);
    let mut covered = 0usize;
    for id in 0..vocab.len() {
        let row = matrix.row_mut(id);
        let hit = if id == UNK_ID {
            None
        } else {
            pretrained.get(vocab.token(id))
        };
        match hit {
            Some(values) => {
                row.copy_from_slice(values);
                covered += 1;
            }
            None => {
                for v in row.iter_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
    }
    Ok((matrix, covered))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    #[test]
    fn tokenize_basic() {
        assert_eq!(
            tokenize("How did serfdom develop?"),
            vec!["how", "did", "serfdom", "develop"]
        );
    }

    #[test]
    fn tokenize_empty_input() {
        assert_eq!(tokenize(""), vec![UNK_TOKEN]);
        assert_eq!(tokenize("   \t  "), vec![UNK_TOKEN]);
    }

    #[test]
    fn tokenize_keeps_standalone_punctuation() {
        assert_eq!(
            tokenize("AP - Reuters said."),
            vec!["ap", "-", "reuters", "said"]
        );
    }

    #[test]
    fn tokenize_raw_preserves_case() {
        assert_eq!(
            tokenize_raw("AP - Reuters said."),
            vec!["AP", "-", "Reuters", "said"]
        );
    }

    #[test]
    fn build_vocab_frequency_order() {
        let vocab = build_vocab(&["a a b"], 1).unwrap();
        assert_eq!(vocab.id("a"), 1);
        assert_eq!(vocab.id("b"), 2);
        assert_eq!(vocab.id(UNK_TOKEN), 0);
        assert_eq!(vocab.len(), 3);
    }

    #[test]
    fn build_vocab_min_freq_drops_rare() {
        let vocab = build_vocab(&["a a b"], 2).unwrap();
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.id("a"), 1);
        assert_eq!(vocab.id("b"), UNK_ID);
    }

    #[test]
    fn build_vocab_lexicographic_tiebreak() {
        let vocab = build_vocab(&["y x", "x y"], 1).unwrap();
        assert!(vocab.id("x") < vocab.id("y"));
    }

    #[test]
    fn build_vocab_empty_corpus_errors() {
        let empty: [&str; 0] = [];
        assert!(matches!(
            build_vocab(&empty, 1),
            Err(DataError::EmptyCorpus)
        ));
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_trec_parses_coarse_labels() {
        let f = write_temp("DESC:manner How did serfdom develop ?\nNUM:count How many people live here ?\n");
        let ds = load_dataset(f.path(), DataFormat::Trec, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 6);
        assert_eq!(ds.examples[0].noisy_label, 1); // DESC
        assert_eq!(ds.examples[0].text, "How did serfdom develop ?");
        assert_eq!(ds.examples[1].noisy_label, 5); // NUM
        assert_eq!(ds.examples[0].clean_label, ds.examples[0].noisy_label);
        ds.validate().unwrap();
    }

    #[test]
    fn load_trec_unknown_label_errors() {
        let f = write_temp("BOGUS:x what is this\n");
        let err = load_dataset(f.path(), DataFormat::Trec, Split::Train).unwrap_err();
        assert!(matches!(err, DataError::UnknownLabel { line: 1, .. }));
    }

    #[test]
    fn load_trec_malformed_line_reports_number() {
        let f = write_temp("DESC:manner How ?\nnocolontag text\n");
        let err = load_dataset(f.path(), DataFormat::Trec, Split::Train).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 2, .. }));
    }

    #[test]
    fn load_agnews_maps_classes_and_joins_text() {
        let f = write_temp("3,\"Wall St.\",\"Stocks rose.\"\n1,\"World news\",\"Something happened\"\n");
        let ds = load_dataset(f.path(), DataFormat::AgNews, Split::Train).unwrap();
        assert_eq!(ds.num_classes, 4);
        assert_eq!(ds.examples[0].noisy_label, 2);
        assert_eq!(ds.examples[0].text, "Wall St. Stocks rose.");
        assert_eq!(ds.examples[1].noisy_label, 0);
    }

    #[test]
    fn load_agnews_rejects_bad_class() {
        let f = write_temp("5,\"t\",\"d\"\n");
        assert!(load_dataset(f.path(), DataFormat::AgNews, Split::Train).is_err());
    }

    #[test]
    fn load_tsv_roundtrip_fields() {
        let f = write_temp("id\tnoisy_label\tclean_label\ttext\n0\t2\t1\thello world\n7\t0\t0\tone\ttab inside\n");
        let ds = load_dataset(f.path(), DataFormat::Tsv, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 3);
        assert_eq!(ds.examples[0].noisy_label, 2);
        assert_eq!(ds.examples[0].clean_label, 1);
        assert_eq!(ds.examples[1].id, 7);
        assert_eq!(ds.examples[1].text, "one\ttab inside");
    }

    #[test]
    fn load_tsv_bad_header_errors() {
        let f = write_temp("id\tnoisy\tclean\ttext\n");
        let err = load_dataset(f.path(), DataFormat::Tsv, Split::Train).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 1, .. }));
    }

    #[test]
    fn split_validation_sizes_and_determinism() {
        let rows: Vec<(usize, usize, usize, String)> = (0..100)
            .map(|i| (i, i % 3, i % 3, format!("token{i} shared")))
            .collect();
        let ds = Dataset::from_rows(rows, 3, Split::Train, None, 1).unwrap();
        let (train, val) = split_validation(&ds, 0.1, 42).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(val.len(), 10);
        let (train2, val2) = split_validation(&ds, 0.1, 42).unwrap();
        let ids = |d: &Dataset| d.examples.iter().map(|e| e.id).collect::<Vec<_>>();
        assert_eq!(ids(&train), ids(&train2));
        assert_eq!(ids(&val), ids(&val2));
        // Different seed gives a different carve.
        let (train3, _) = split_validation(&ds, 0.1, 43).unwrap();
        assert_ne!(ids(&train), ids(&train3));
    }

    #[test]
    fn split_validation_vocab_from_train_only() {
        let rows: Vec<(usize, usize, usize, String)> = (0..10)
            .map(|i| (i, 0, 0, format!("unique{i} common")))
            .collect();
        let ds = Dataset::from_rows(rows, 2, Split::Train, None, 1).unwrap();
        let (train, val) = split_validation(&ds, 0.2, 7).unwrap();
        for e in &val.examples {
            let token = format!("unique{}", e.id);
            assert!(!train.vocab.contains(&token));
            // Validation-only tokens map to UNK under the train vocab.
            assert!(e.tokens.contains(&UNK_ID));
        }
        for e in &train.examples {
            assert!(!e.tokens.contains(&UNK_ID));
        }
    }

    #[test]
    fn split_validation_rejects_degenerate_fractions() {
        let rows = vec![(0, 0, 0, "a".to_string()), (1, 0, 0, "b".to_string())];
        let ds = Dataset::from_rows(rows, 1, Split::Train, None, 1).unwrap();
        assert!(split_validation(&ds, 0.0, 1).is_err());
        assert!(split_validation(&ds, 1.0, 1).is_err());
        assert!(split_validation(&ds, 0.1, 1).is_err()); // rounds to zero validation rows
    }

    #[test]
    fn load_embeddings_copies_and_falls_back() {
        let vocab = build_vocab(&["the cat"], 1).unwrap();
        let f = write_temp("the 0.1 0.2\n");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (m, covered) = load_embeddings(f.path(), &vocab, 2, &mut rng).unwrap();
        assert_eq!(covered, 1);
        let the_row = m.row(vocab.id("the"));
        assert_eq!(the_row, &[0.1, 0.2]);
        let cat_row = m.row(vocab.id("cat"));
        assert!(cat_row.iter().all(|v| (-0.1..0.1).contains(v)));
        let unk_row = m.row(UNK_ID);
        assert!(unk_row.iter().all(|v| (-0.1..0.1).contains(v)));
    }

    #[test]
    fn load_embeddings_dim_mismatch_names_token() {
        let vocab = build_vocab(&["a b"], 1).unwrap();
        let f = write_temp("a 0.1\n");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = load_embeddings(f.path(), &vocab, 2, &mut rng).unwrap_err();
        match err {
            DataError::EmbeddingDim { token, expected, got } => {
                assert_eq!(token, "a");
                assert_eq!(expected, 2);
                assert_eq!(got, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn tokenize_idempotent_on_own_output(text in "[ -~]{0,60}") {
            let once = tokenize(&text);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
