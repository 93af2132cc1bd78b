//! End-to-end training orchestration: warmup, mixture fit over the warmup
//! losses, the de-noising phase (or the plain-CE baseline arm), per-epoch
//! evaluation with Best/Last bookkeeping, and the on-disk artifacts of a run.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::Digest;
use thiserror::Error;

use crate::bmm::{
    build_posterior_table, fit_bmm, normalize_losses, BetaMixture, BmmError, PosteriorTable,
};
use crate::data::{
    load_dataset, load_embeddings, split_validation, DataError, DataFormat, Dataset, Split,
};
use crate::model::{
    argmax_class, backward_into, forward, forward_given_mask, loss_denoise, warmup_loss_into,
    Checkpoint, ClassifierGrads, ClassifierParams, LossVariant, ModelError, NoiseHeadGrads,
    NoiseHeadParams, Phase, RepMode,
};
use crate::noise::{inject, write_noisy_dataset, NoiseError, NoiseReport, NoiseSpec};
use crate::numerics::{adam_step, AdamState, Matrix, NumericsError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Bmm(#[from] BmmError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error("parameters became non-finite at epoch {0}")]
    NonFiniteParams(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    DnSoft,
    DnHard,
}

impl Mode {
    pub fn loss_variant(&self) -> Option<LossVariant> {
        match self {
            Mode::Baseline => None,
            Mode::DnSoft => Some(LossVariant::Soft),
            Mode::DnHard => Some(LossVariant::Hard),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "dn-soft" => Ok(Mode::DnSoft),
            "dn-hard" => Ok(Mode::DnHard),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::DnSoft => "dn-soft",
            Mode::DnHard => "dn-hard",
        })
    }
}

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Warmup epochs trained with plain cross-entropy before the mixture fit.
    pub t0: usize,
    /// Total epochs.
    pub epochs: usize,
    /// Trade-off weight of the clean-sample cross-entropy term.
    pub beta: f64,
    pub mode: Mode,
    pub rep_mode: RepMode,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    /// Epochs between evaluations; the final epoch is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t0: 9,
            epochs: 60,
            beta: 4.0,
            mode: Mode::Baseline,
            rep_mode: RepMode::Logits,
            lr: 1e-3,
            batch_size: 32,
            dropout: 0.3,
            embedding_dim: 50,
            hidden_dim: 128,
            seed: 42,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        if self.t0 < 1 || self.t0 >= self.epochs {
            return Err(TrainingError::InvalidConfig(format!(
                "need 1 <= t0 < epochs, got t0={} epochs={}",
                self.t0, self.epochs
            )));
        }
        if self.mode != Mode::Baseline && self.beta <= 0.0 {
            return Err(TrainingError::InvalidConfig(format!(
                "beta must be positive in de-noising modes, got {}",
                self.beta
            )));
        }
        if self.batch_size < 1 {
            return Err(TrainingError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(TrainingError::InvalidConfig("eval_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainingError::InvalidConfig(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TrainingError::InvalidConfig(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.embedding_dim < 1 || self.hidden_dim < 1 {
            return Err(TrainingError::InvalidConfig(
                "embedding_dim and hidden_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Canonical digest of the configuration, stamped into checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut hasher = sha2::Sha256::new();
        hasher.update(canon.as_bytes());
        hasher.finalize().into()
    }
}

/// Derives an independent 64-bit seed from a master seed and a context tag.
pub fn sub_seed(master: u64, tag: &str) -> u64 {
    let mut hasher = sha2::Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy against noisy validation labels; absent on skipped epochs.
    pub val_accuracy: Option<f64>,
    /// Accuracy against clean test labels; absent on skipped epochs.
    pub test_accuracy: Option<f64>,
}

/// Agreement of the thresholded posterior with the true clean/noisy flags.
/// Diagnostics only: this is the one place the clean-label column is read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmmDiagnostics {
    pub separation_accuracy: f64,
    pub auc: f64,
    pub fit_epoch: usize,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_epoch: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Test accuracy at the epoch of maximum validation accuracy.
    pub best_test_accuracy: f64,
    pub last_test_accuracy: f64,
    /// last_test_accuracy - best_test_accuracy.
    pub gap: f64,
    pub bmm_diagnostics: BmmDiagnostics,
}

/// Train/validation/test datasets sharing the train vocabulary.
#[derive(Debug, Clone)]
pub struct DataBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

struct ClassifierAdam {
    embedding: AdamState,
    w1: AdamState,
    b1: AdamState,
    w2: AdamState,
    b2: AdamState,
}

impl ClassifierAdam {
    fn new(params: &ClassifierParams, lr: f64) -> Self {
        ClassifierAdam {
            embedding: AdamState::new(params.embedding.as_slice().len(), lr),
            w1: AdamState::new(params.w1.as_slice().len(), lr),
            b1: AdamState::new(params.b1.len(), lr),
            w2: AdamState::new(params.w2.as_slice().len(), lr),
            b2: AdamState::new(params.b2.len(), lr),
        }
    }

    fn apply(
        &mut self,
        params: &mut ClassifierParams,
        grads: &ClassifierGrads,
    ) -> Result<(), NumericsError> {
        adam_step(
            params.embedding.as_mut_slice(),
            grads.embedding.as_slice(),
            &mut self.embedding,
        )?;
        adam_step(params.w1.as_mut_slice(), grads.w1.as_slice(), &mut self.w1)?;
        adam_step(&mut params.b1, &grads.b1, &mut self.b1)?;
        adam_step(params.w2.as_mut_slice(), grads.w2.as_slice(), &mut self.w2)?;
        adam_step(&mut params.b2, &grads.b2, &mut self.b2)?;
        Ok(())
    }
}

struct NoiseHeadAdam {
    v1: AdamState,
    c1: AdamState,
    v2: AdamState,
    c2: AdamState,
}

impl NoiseHeadAdam {
    fn new(params: &NoiseHeadParams, lr: f64) -> Self {
        NoiseHeadAdam {
            v1: AdamState::new(params.v1.as_slice().len(), lr),
            c1: AdamState::new(params.c1.len(), lr),
            v2: AdamState::new(params.v2.as_slice().len(), lr),
            c2: AdamState::new(params.c2.len(), lr),
        }
    }

    fn apply(
        &mut self,
        params: &mut NoiseHeadParams,
        grads: &NoiseHeadGrads,
    ) -> Result<(), NumericsError> {
        adam_step(params.v1.as_mut_slice(), grads.v1.as_slice(), &mut self.v1)?;
        adam_step(&mut params.c1, &grads.c1, &mut self.c1)?;
        adam_step(params.v2.as_mut_slice(), grads.v2.as_slice(), &mut self.v2)?;
        adam_step(&mut params.c2, &grads.c2, &mut self.c2)?;
        Ok(())
    }
}

/// Mutable model state owned by one training run.
pub struct TrainState {
    pub cparams: ClassifierParams,
    pub nparams: Option<NoiseHeadParams>,
    adam_c: ClassifierAdam,
    adam_n: Option<NoiseHeadAdam>,
    dropout_rng: ChaCha8Rng,
    lr: f64,
    batch_size: usize,
    master_seed: u64,
}

impl TrainState {
    /// Initializes classifier parameters from the run seed. All randomness
    /// (including fallback rows of a pretrained embedding file) comes from a
    /// dedicated init stream.
    pub fn init(
        config: &TrainConfig,
        bundle: &DataBundle,
        embeddings_path: Option<&Path>,
    ) -> Result<TrainState, TrainingError> {
        let vocab = &bundle.train.vocab;
        let num_classes = bundle.train.num_classes;
        let mut init_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "init"));
        let embedding = match embeddings_path {
            Some(path) => {
                let (matrix, covered) =
                    load_embeddings(path, vocab, config.embedding_dim, &mut init_rng)?;
                eprintln!(
                    "loaded pretrained embeddings: {covered}/{} vocab rows covered",
                    vocab.len()
                );
                matrix
            }
            None => Matrix::uniform(vocab.len(), config.embedding_dim, 0.1, &mut init_rng),
        };
        let bound1 = (6.0 / (config.embedding_dim + config.hidden_dim) as f64).sqrt();
        let w1 = Matrix::uniform(config.embedding_dim, config.hidden_dim, bound1, &mut init_rng);
        let bound2 = (6.0 / (config.hidden_dim + num_classes) as f64).sqrt();
        let w2 = Matrix::uniform(config.hidden_dim, num_classes, bound2, &mut init_rng);
        let cparams = ClassifierParams {
            embedding,
            w1,
            b1: vec![0.0; config.hidden_dim],
            w2,
            b2: vec![0.0; num_classes],
            dropout_rate: config.dropout,
        };
        let adam_c = ClassifierAdam::new(&cparams, config.lr);
        Ok(TrainState {
            cparams,
            nparams: None,
            adam_c,
            adam_n: None,
            dropout_rng: ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "dropout")),
            lr: config.lr,
            batch_size: config.batch_size,
            master_seed: config.seed,
        })
    }

    /// Creates the noise head (first step of the de-noising phase).
    pub fn attach_noise_head(&mut self, rep_mode: RepMode, num_classes: usize) {
        let rep_width = rep_mode.width(self.cparams.hidden_dim(), num_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.master_seed, "noise_head_init"));
        let nparams = NoiseHeadParams::init(rep_width, num_classes, &mut rng);
        self.adam_n = Some(NoiseHeadAdam::new(&nparams, self.lr));
        self.nparams = Some(nparams);
    }

    fn check_finite(&self, epoch: usize) -> Result<(), TrainingError> {
        let ok = self.cparams.is_finite()
            && self.nparams.as_ref().is_none_or(|n| n.is_finite());
        if ok {
            Ok(())
        } else {
            Err(TrainingError::NonFiniteParams(epoch))
        }
    }
}

fn shuffled_order(master_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(master_seed, &format!("shuffle/{epoch}")));
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

use rand::Rng as _;

/// One epoch of plain cross-entropy training on the classifier (warmup and
/// baseline arm). Returns the mean per-example loss.
fn train_epoch_ce(
    state: &mut TrainState,
    train: &Dataset,
    epoch: usize,
) -> Result<f64, TrainingError> {
    let order = shuffled_order(state.master_seed, epoch, train.len());
    let mut grads = ClassifierGrads::zeros_like(&state.cparams);
    let mut total_loss = 0.0;
    for batch in order.chunks(state.batch_size) {
        grads.zero();
        for &idx in batch {
            let example = &train.examples[idx];
            let trace = forward(
                &state.cparams,
                None,
                example,
                Phase::Train,
                RepMode::Logits,
                &mut state.dropout_rng,
            )?;
            total_loss += warmup_loss_into(
                &state.cparams,
                &trace,
                example.noisy_label,
                &mut grads,
            )?;
        }
        grads.scale(1.0 / batch.len() as f64);
        state.adam_c.apply(&mut state.cparams, &grads)?;
    }
    state.check_finite(epoch)?;
    Ok(total_loss / train.len() as f64)
}

/// One epoch of joint classifier + noise-head training under the de-noising
/// loss. Returns the mean per-example loss.
fn train_epoch_denoise(
    state: &mut TrainState,
    train: &Dataset,
    epoch: usize,
    posteriors: &PosteriorTable,
    beta: f64,
    variant: LossVariant,
    rep_mode: RepMode,
) -> Result<f64, TrainingError> {
    let order = shuffled_order(state.master_seed, epoch, train.len());
    let mut cgrads = ClassifierGrads::zeros_like(&state.cparams);
    let nparams_shape = state
        .nparams
        .as_ref()
        .expect("noise head attached before the de-noising phase")
        .clone();
    let mut ngrads = NoiseHeadGrads::zeros_like(&nparams_shape);
    let mut total_loss = 0.0;
    for batch in order.chunks(state.batch_size) {
        cgrads.zero();
        ngrads.zero();
        for &idx in batch {
            let example = &train.examples[idx];
            let posterior = posteriors.get(example.id);
            let nparams = state.nparams.as_ref().expect("noise head attached");
            let trace = forward(
                &state.cparams,
                Some(nparams),
                example,
                Phase::Train,
                rep_mode,
                &mut state.dropout_rng,
            )?;
            total_loss += loss_denoise(&trace, example.noisy_label, beta, posterior, variant)?;
            backward_into(
                &state.cparams,
                nparams,
                &trace,
                example.noisy_label,
                beta,
                posterior,
                variant,
                &mut cgrads,
                &mut ngrads,
            )?;
        }
        cgrads.scale(1.0 / batch.len() as f64);
        ngrads.scale(1.0 / batch.len() as f64);
        state.adam_c.apply(&mut state.cparams, &cgrads)?;
        state
            .adam_n
            .as_mut()
            .expect("noise head optimizer attached")
            .apply(state.nparams.as_mut().expect("noise head attached"), &ngrads)?;
    }
    state.check_finite(epoch)?;
    Ok(total_loss / train.len() as f64)
}

/// Eval-mode accuracy of the classifier on a split: argmax of the clean-head
/// logits against noisy labels (train/validation) or clean labels (test).
pub fn evaluate(cparams: &ClassifierParams, dataset: &Dataset) -> Result<f64, TrainingError> {
    if dataset.is_empty() {
        return Err(TrainingError::EmptySplit);
    }
    let mask = vec![1.0; cparams.hidden_dim()];
    let mut correct = 0usize;
    for example in &dataset.examples {
        let trace = forward_given_mask(
            cparams,
            None,
            &example.tokens,
            mask.clone(),
            RepMode::Logits,
        )?;
        let predicted = argmax_class(&trace.logits_c);
        let label = match dataset.split {
            Split::Test => example.clean_label,
            Split::Train | Split::Validation => example.noisy_label,
        };
        if predicted == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Epoch bookkeeping: per-epoch records plus a snapshot of the parameters at
/// the best-validation epoch (ties keep the earliest).
pub struct RunTracker {
    pub records: Vec<EpochRecord>,
    best: Option<BestSnapshot>,
}

struct BestSnapshot {
    epoch: usize,
    val_accuracy: f64,
    test_accuracy: f64,
    cparams: ClassifierParams,
    nparams: Option<NoiseHeadParams>,
}

impl RunTracker {
    pub fn new() -> Self {
        RunTracker {
            records: Vec::new(),
            best: None,
        }
    }

    fn observe(
        &mut self,
        epoch: usize,
        train_loss: f64,
        accuracies: Option<(f64, f64)>,
        state: &TrainState,
    ) {
        let (val_accuracy, test_accuracy) = match accuracies {
            Some((v, t)) => (Some(v), Some(t)),
            None => (None, None),
        };
        self.records.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
            test_accuracy,
        });
        if let Some((val, test)) = accuracies {
            let improved = self.best.as_ref().is_none_or(|b| val > b.val_accuracy);
            if improved {
                self.best = Some(BestSnapshot {
                    epoch,
                    val_accuracy: val,
                    test_accuracy: test,
                    cparams: state.cparams.clone(),
                    nparams: state.nparams.clone(),
                });
            }
        }
    }
}

impl Default for RunTracker {
    fn default() -> Self {
        Self::new()
    }
}

fn should_eval(epoch: usize, config: &TrainConfig) -> bool {
    epoch.is_multiple_of(config.eval_every) || epoch == config.epochs
}

fn eval_pair(
    state: &TrainState,
    bundle: &DataBundle,
) -> Result<(f64, f64), TrainingError> {
    let val = evaluate(&state.cparams, &bundle.val)?;
    let test = evaluate(&state.cparams, &bundle.test)?;
    Ok((val, test))
}

/// Output of the warmup phase: raw per-sample cross-entropy losses recorded
/// in a separate no-dropout pass after epoch T0, in train-set order.
pub struct WarmupLosses {
    pub raw: Vec<f64>,
    pub ids: Vec<usize>,
}

/// Trains T0 epochs of plain cross-entropy, evaluating per the config
/// cadence, then records every train sample's loss under the frozen
/// epoch-T0 parameters.
pub fn run_warmup(
    config: &TrainConfig,
    bundle: &DataBundle,
    state: &mut TrainState,
    tracker: &mut RunTracker,
) -> Result<WarmupLosses, TrainingError> {
    for epoch in 1..=config.t0 {
        let train_loss = train_epoch_ce(state, &bundle.train, epoch)?;
        let acc = if should_eval(epoch, config) {
            Some(eval_pair(state, bundle)?)
        } else {
            None
        };
        tracker.observe(epoch, train_loss, acc, state);
    }
    let mut raw = Vec::with_capacity(bundle.train.len());
    let mut ids = Vec::with_capacity(bundle.train.len());
    let mask = vec![1.0; state.cparams.hidden_dim()];
    for example in &bundle.train.examples {
        let trace = forward_given_mask(
            &state.cparams,
            None,
            &example.tokens,
            mask.clone(),
            RepMode::Logits,
        )?;
        let probs = crate::numerics::softmax(&trace.logits_c)?;
        raw.push(crate::numerics::cross_entropy(&probs, example.noisy_label)?);
        ids.push(example.id);
    }
    Ok(WarmupLosses { raw, ids })
}

/// Trains epochs T0+1..T. De-noising modes train the classifier and noise
/// head jointly under the frozen posterior table; the baseline arm continues
/// plain cross-entropy on the classifier alone.
pub fn run_denoise_phase(
    config: &TrainConfig,
    bundle: &DataBundle,
    state: &mut TrainState,
    tracker: &mut RunTracker,
    posteriors: &PosteriorTable,
) -> Result<(), TrainingError> {
    if let Some(variant) = config.mode.loss_variant() {
        state.attach_noise_head(config.rep_mode, bundle.train.num_classes);
        for epoch in (config.t0 + 1)..=config.epochs {
            let train_loss = train_epoch_denoise(
                state,
                &bundle.train,
                epoch,
                posteriors,
                config.beta,
                variant,
                config.rep_mode,
            )?;
            let acc = if should_eval(epoch, config) {
                Some(eval_pair(state, bundle)?)
            } else {
                None
            };
            tracker.observe(epoch, train_loss, acc, state);
        }
    } else {
        for epoch in (config.t0 + 1)..=config.epochs {
            let train_loss = train_epoch_ce(state, &bundle.train, epoch)?;
            let acc = if should_eval(epoch, config) {
                Some(eval_pair(state, bundle)?)
            } else {
                None
            };
            tracker.observe(epoch, train_loss, acc, state);
        }
    }
    Ok(())
}

fn clean_flags(train: &Dataset) -> Vec<bool> {
    train
        .examples
        .iter()
        .map(|e| e.noisy_label == e.clean_label)
        .collect()
}

/// Mann-Whitney AUC of the posterior as a clean-vs-noisy score, with average
/// ranks on ties; 0.5 when one of the groups is empty.
fn posterior_auc(posteriors: &[f64], is_clean: &[bool]) -> f64 {
    let n_clean = is_clean.iter().filter(|&&c| c).count();
    let n_noisy = is_clean.len() - n_clean;
    if n_clean == 0 || n_noisy == 0 {
        return 0.5;
    }
    let mut indexed: Vec<(f64, bool)> = posteriors
        .iter()
        .cloned()
        .zip(is_clean.iter().cloned())
        .collect();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("posteriors are finite"));
    let mut rank_sum_clean = 0.0;
    let mut i = 0usize;
    while i < indexed.len() {
        let mut j = i;
        while j + 1 < indexed.len() && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        // Average 1-based rank of the tie group [i, j].
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for item in &indexed[i..=j] {
            if item.1 {
                rank_sum_clean += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_clean - (n_clean * (n_clean + 1)) as f64 / 2.0;
    u / (n_clean as f64 * n_noisy as f64)
}

fn bmm_diagnostics(
    posteriors: &PosteriorTable,
    train: &Dataset,
    fit_epoch: usize,
    degenerate: bool,
) -> BmmDiagnostics {
    let flags = clean_flags(train);
    let values: Vec<f64> = train
        .examples
        .iter()
        .map(|e| posteriors.get(e.id))
        .collect();
    let agree = values
        .iter()
        .zip(&flags)
        .filter(|(&p, &c)| (p > 0.5) == c)
        .count();
    BmmDiagnostics {
        separation_accuracy: agree as f64 / values.len().max(1) as f64,
        auc: posterior_auc(&values, &flags),
        fit_epoch,
        degenerate,
    }
}

/// Where a run reads its data from.
#[derive(Debug, Clone)]
pub struct DataSpec {
    pub train_path: PathBuf,
    pub train_format: DataFormat,
    pub test_path: PathBuf,
    pub test_format: DataFormat,
    /// Pre-carved validation file (same format as train); when absent a
    /// validation split is carved from the train file.
    pub val_path: Option<PathBuf>,
    pub val_fraction: f64,
    pub min_freq: usize,
    pub embeddings_path: Option<PathBuf>,
}

/// One full experiment: data, optional noise injection, and training.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: TrainConfig,
    pub noise: Option<NoiseSpec>,
    pub data: DataSpec,
    pub out_dir: PathBuf,
    /// Audit switch: overwrite every train/validation clean label with a
    /// sentinel before training. Training outputs must not change; only the
    /// clean-label diagnostics may.
    pub poison_clean_labels: bool,
}

/// On-disk record of the mixture fit.
#[derive(Debug, Serialize, Deserialize)]
pub struct BmmFileRecord {
    pub lambda_c: f64,
    pub lambda_n: f64,
    pub alpha_c: f64,
    pub beta_c: f64,
    pub alpha_n: f64,
    pub beta_n: f64,
    pub fit_log_likelihood: f64,
    pub iterations_run: usize,
    pub converged: bool,
    /// True when the fit fell back to the all-clean mixture.
    pub degenerate: bool,
}

impl BmmFileRecord {
    fn new(m: &BetaMixture, degenerate: bool) -> Self {
        BmmFileRecord {
            lambda_c: m.lambda_c,
            lambda_n: m.lambda_n,
            alpha_c: m.alpha_c,
            beta_c: m.beta_c,
            alpha_n: m.alpha_n,
            beta_n: m.beta_n,
            fit_log_likelihood: m.fit_log_likelihood,
            iterations_run: m.iterations_run,
            converged: m.converged,
            degenerate,
        }
    }
}

#[derive(Debug, Serialize)]
struct NoiseReportFile<'a> {
    train: &'a NoiseReport,
    validation: &'a NoiseReport,
}

/// Loads and prepares the three splits: optional validation carve, optional
/// noise injection (train and validation only, independent sub-seeds), the
/// audit poisoning hook, and train-vocabulary propagation.
pub fn prepare_data(
    spec: &ExperimentSpec,
) -> Result<(DataBundle, Option<(NoiseReport, NoiseReport)>), TrainingError> {
    let data = &spec.data;
    let train_raw = load_dataset(&data.train_path, data.train_format, Split::Train)?;
    let (mut train, mut val) = match &data.val_path {
        Some(path) => {
            let val = load_dataset(path, data.train_format, Split::Validation)?;
            (train_raw, val)
        }
        None => split_validation(
            &train_raw,
            data.val_fraction,
            sub_seed(spec.config.seed, "split"),
        )?,
    };
    let test = load_dataset(&data.test_path, data.test_format, Split::Test)?;

    let mut reports = None;
    if let Some(noise_spec) = &spec.noise {
        let (noisy_train, train_report) = inject(&train, noise_spec)?;
        let mut val_spec = noise_spec.clone();
        val_spec.seed = sub_seed(noise_spec.seed, "validation");
        let (noisy_val, val_report) = inject(&val, &val_spec)?;
        train = noisy_train;
        val = noisy_val;
        reports = Some((train_report, val_report));
    }

    if spec.poison_clean_labels {
        for e in &mut train.examples {
            e.clean_label = 0;
        }
        for e in &mut val.examples {
            e.clean_label = 0;
        }
    }

    // Vocabulary comes from the train split only.
    let train_texts: Vec<&str> = train.examples.iter().map(|e| e.text.as_str()).collect();
    let vocab = std::sync::Arc::new(crate::data::build_vocab(&train_texts, data.min_freq)?);
    let train = train.with_vocab(std::sync::Arc::clone(&vocab));
    let val = val.with_vocab(std::sync::Arc::clone(&vocab));
    let mut test = test.with_vocab(vocab);
    test.num_classes = train.num_classes;
    train.validate()?;
    val.validate()?;
    test.validate()?;
    Ok((DataBundle { train, val, test }, reports))
}

fn write_json<P: AsRef<Path>, T: Serialize>(path: P, value: &T) -> Result<(), TrainingError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn write_losses_csv(
    path: &Path,
    bundle: &DataBundle,
    warmup: &WarmupLosses,
    normalized: &[f64],
    posteriors: &PosteriorTable,
) -> Result<(), TrainingError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "id,raw_loss,normalized_loss,posterior,is_noisy")?;
    for (i, example) in bundle.train.examples.iter().enumerate() {
        let is_noisy = u8::from(example.noisy_label != example.clean_label);
        writeln!(
            out,
            "{},{},{},{},{}",
            example.id,
            warmup.raw[i],
            normalized[i],
            posteriors.get(example.id),
            is_noisy
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Runs a complete experiment and writes its artifacts (noisy TSVs and noise
/// report when noise was injected, `losses_T0.csv`, `bmm.json`,
/// `metrics.json`, and best/last checkpoints) into `spec.out_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<MetricsReport, TrainingError> {
    spec.config.validate()?;
    let config = &spec.config;
    std::fs::create_dir_all(&spec.out_dir)?;

    let (bundle, noise_reports) = prepare_data(spec)?;
    if let Some((train_report, val_report)) = &noise_reports {
        write_noisy_dataset(&bundle.train, spec.out_dir.join("noisy_train.tsv"))?;
        write_noisy_dataset(&bundle.val, spec.out_dir.join("noisy_val.tsv"))?;
        write_json(
            spec.out_dir.join("noise_report.json"),
            &NoiseReportFile {
                train: train_report,
                validation: val_report,
            },
        )?;
    }

    let mut state = TrainState::init(config, &bundle, spec.data.embeddings_path.as_deref())?;
    let mut tracker = RunTracker::new();
    let warmup = run_warmup(config, &bundle, &mut state, &mut tracker)?;

    // Fit the mixture on the recorded warmup losses; degenerate inputs fall
    // back to all-clean posteriors so easy settings keep training.
    let normalized = normalize_losses(&warmup.raw)?;
    let (mixture, degenerate) = if normalized.degenerate {
        eprintln!(
            "warning: warmup losses are degenerate (all equal); falling back to all-clean posteriors"
        );
        (BetaMixture::all_clean_fallback(), true)
    } else {
        match fit_bmm(&normalized.values) {
            Ok(m) => (m, false),
            Err(e) => {
                eprintln!("warning: mixture fit failed ({e}); falling back to all-clean posteriors");
                (BetaMixture::all_clean_fallback(), true)
            }
        }
    };
    let posteriors = if degenerate {
        PosteriorTable::all_clean(&warmup.ids, config.t0)
    } else {
        build_posterior_table(&mixture, &normalized.values, &warmup.ids, config.t0)?
    };
    write_json(
        spec.out_dir.join("bmm.json"),
        &BmmFileRecord::new(&mixture, degenerate),
    )?;
    write_losses_csv(
        &spec.out_dir.join("losses_T0.csv"),
        &bundle,
        &warmup,
        &normalized.values,
        &posteriors,
    )?;

    run_denoise_phase(config, &bundle, &mut state, &mut tracker, &posteriors)?;

    let best = tracker
        .best
        .as_ref()
        .expect("final epoch is always evaluated");
    let last_record = tracker
        .records
        .last()
        .expect("at least one epoch was trained");
    let last_test_accuracy = last_record
        .test_accuracy
        .expect("final epoch is always evaluated");
    let report = MetricsReport {
        per_epoch: tracker.records.clone(),
        best_epoch: best.epoch,
        best_val_accuracy: best.val_accuracy,
        best_test_accuracy: best.test_accuracy,
        last_test_accuracy,
        gap: last_test_accuracy - best.test_accuracy,
        bmm_diagnostics: bmm_diagnostics(&posteriors, &bundle.train, config.t0, degenerate),
    };
    write_json(spec.out_dir.join("metrics.json"), &report)?;

    let config_hash = config.hash();
    Checkpoint {
        config_hash,
        rep_mode: config.rep_mode,
        num_classes: bundle.train.num_classes,
        vocab: (*bundle.train.vocab).clone(),
        classifier: best.cparams.clone(),
        noise_head: best.nparams.clone(),
    }
    .save(spec.out_dir.join("checkpoint_best.bin"))?;
    Checkpoint {
        config_hash,
        rep_mode: config.rep_mode,
        num_classes: bundle.train.num_classes,
        vocab: (*bundle.train.vocab).clone(),
        classifier: state.cparams.clone(),
        noise_head: state.nparams.clone(),
    }
    .save(spec.out_dir.join("checkpoint_last.bin"))?;

    Ok(report)
}
