//! The classifier, the auxiliary noise-model head stacked on top of it, and
//! the de-noising losses with exact analytic gradients.
//!
//! The classifier is a desk-scale embedding-mean MLP: token embeddings are
//! mean-pooled, passed through one ReLU hidden layer with inverted dropout,
//! then projected to class logits. The noise head is a 2-layer feedforward
//! network (hidden width 4x its input) over a representation taken from the
//! classifier: the logits alone, or the penultimate hidden layer concatenated
//! with the logits.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Example, Vocab};
use crate::numerics::{cross_entropy, softmax, Matrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {token} out of range for vocab of {vocab} rows")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("trace has no noise-head pass; forward was called without noise head parameters")]
    MissingNoiseHead,
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepMode {
    /// Representation = classifier logits (random label noise).
    Logits,
    /// Representation = penultimate hidden layer concatenated with the
    /// logits (input-conditional label noise).
    Concat,
}

impl RepMode {
    pub fn width(&self, hidden_dim: usize, num_classes: usize) -> usize {
        match self {
            RepMode::Logits => num_classes,
            RepMode::Concat => hidden_dim + num_classes,
        }
    }
}

impl std::str::FromStr for RepMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logits" => Ok(RepMode::Logits),
            "concat" => Ok(RepMode::Concat),
            other => Err(format!("unknown representation mode {other:?}")),
        }
    }
}

impl std::fmt::Display for RepMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RepMode::Logits => "logits",
            RepMode::Concat => "concat",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Soft,
    Hard,
}

/// Classifier parameters: embedding table, one hidden layer, output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub embedding: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub dropout_rate: f64,
}

impl ClassifierParams {
    pub fn init<R: Rng>(
        vocab_size: usize,
        embedding_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Self {
        let embedding = Matrix::uniform(vocab_size, embedding_dim, 0.1, rng);
        let bound1 = (6.0 / (embedding_dim + hidden_dim) as f64).sqrt();
        let w1 = Matrix::uniform(embedding_dim, hidden_dim, bound1, rng);
        let bound2 = (6.0 / (hidden_dim + num_classes) as f64).sqrt();
        let w2 = Matrix::uniform(hidden_dim, num_classes, bound2, rng);
        ClassifierParams {
            embedding,
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: vec![0.0; num_classes],
            dropout_rate,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.is_finite()
            && self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().all(|v| v.is_finite())
            && self.b2.iter().all(|v| v.is_finite())
    }
}

/// Noise-head parameters: 2-layer feedforward, hidden width 4x input width.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseHeadParams {
    pub v1: Matrix,
    pub c1: Vec<f64>,
    pub v2: Matrix,
    pub c2: Vec<f64>,
}

impl NoiseHeadParams {
    pub fn init<R: Rng>(rep_width: usize, num_classes: usize, rng: &mut R) -> Self {
        let hidden = 4 * rep_width;
        let bound1 = (6.0 / (rep_width + hidden) as f64).sqrt();
        let v1 = Matrix::uniform(rep_width, hidden, bound1, rng);
        let bound2 = (6.0 / (hidden + num_classes) as f64).sqrt();
        let v2 = Matrix::uniform(hidden, num_classes, bound2, rng);
        NoiseHeadParams {
            v1,
            c1: vec![0.0; hidden],
            v2,
            c2: vec![0.0; num_classes],
        }
    }

    pub fn rep_width(&self) -> usize {
        self.v1.rows()
    }

    pub fn hidden_width(&self) -> usize {
        self.v1.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.v1.is_finite()
            && self.v2.is_finite()
            && self.c1.iter().all(|v| v.is_finite())
            && self.c2.iter().all(|v| v.is_finite())
    }
}

/// Noise-head portion of a forward trace.
#[derive(Debug, Clone)]
pub struct NoiseTrace {
    pub representation: Vec<f64>,
    /// Post-ReLU hidden activations of the noise head.
    pub noise_hidden: Vec<f64>,
    pub logits_n: Vec<f64>,
}

/// Activations recorded by one forward pass; consumed by the backward pass
/// (the dropout mask is reused, never redrawn).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub mean_embedding: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden_post: Vec<f64>,
    /// Inverted-dropout mask, entries 0 or 1/(1-p); all ones in eval mode.
    pub dropout_mask: Vec<f64>,
    pub logits_c: Vec<f64>,
    pub noise: Option<NoiseTrace>,
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Forward pass with an explicit dropout mask (the deterministic core of
/// [`forward`]; also used by gradient-check harnesses).
pub fn forward_given_mask(
    cparams: &ClassifierParams,
    nparams: Option<&NoiseHeadParams>,
    tokens: &[usize],
    dropout_mask: Vec<f64>,
    rep_mode: RepMode,
) -> Result<ForwardTrace, ModelError> {
    assert!(!tokens.is_empty(), "token sequence must be non-empty");
    let d = cparams.embedding_dim();
    assert_eq!(dropout_mask.len(), cparams.hidden_dim(), "dropout mask width");
    let mut mean_embedding = vec![0.0; d];
    for &t in tokens {
        if t >= cparams.embedding.rows() {
            return Err(ModelError::TokenOutOfRange {
                token: t,
                vocab: cparams.embedding.rows(),
            });
        }
        for (m, &e) in mean_embedding.iter_mut().zip(cparams.embedding.row(t)) {
            *m += e;
        }
    }
    let inv_n = 1.0 / tokens.len() as f64;
    for m in &mut mean_embedding {
        *m *= inv_n;
    }

    let mut hidden_pre = cparams.w1.vecmat(&mean_embedding);
    for (h, &b) in hidden_pre.iter_mut().zip(&cparams.b1) {
        *h += b;
    }
    let hidden_post = relu(&hidden_pre);
    let hidden_dropped: Vec<f64> = hidden_post
        .iter()
        .zip(&dropout_mask)
        .map(|(&h, &m)| h * m)
        .collect();
    let mut logits_c = cparams.w2.vecmat(&hidden_dropped);
    for (l, &b) in logits_c.iter_mut().zip(&cparams.b2) {
        *l += b;
    }

    let noise = nparams.map(|np| {
        let representation = match rep_mode {
            RepMode::Logits => logits_c.clone(),
            RepMode::Concat => {
                let mut rep = hidden_post.clone();
                rep.extend_from_slice(&logits_c);
                rep
            }
        };
        debug_assert_eq!(representation.len(), np.rep_width());
        let mut noise_pre = np.v1.vecmat(&representation);
        for (h, &b) in noise_pre.iter_mut().zip(&np.c1) {
            *h += b;
        }
        let noise_hidden = relu(&noise_pre);
        let mut logits_n = np.v2.vecmat(&noise_hidden);
        for (l, &b) in logits_n.iter_mut().zip(&np.c2) {
            *l += b;
        }
        NoiseTrace {
            representation,
            noise_hidden,
            logits_n,
        }
    });

    Ok(ForwardTrace {
        tokens: tokens.to_vec(),
        mean_embedding,
        hidden_pre,
        hidden_post,
        dropout_mask,
        logits_c,
        noise,
    })
}

/// Full forward pass. Dropout fires only in the train phase (and only when
/// the dropout rate is positive); eval mode is deterministic.
pub fn forward<R: Rng>(
    cparams: &ClassifierParams,
    nparams: Option<&NoiseHeadParams>,
    example: &Example,
    phase: Phase,
    rep_mode: RepMode,
    rng: &mut R,
) -> Result<ForwardTrace, ModelError> {
    let h = cparams.hidden_dim();
    let p = cparams.dropout_rate;
    let dropout_mask = if phase == Phase::Train && p > 0.0 {
        let keep_scale = 1.0 / (1.0 - p);
        (0..h)
            .map(|_| {
                if rng.random_range(0.0..1.0) < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect()
    } else {
        vec![1.0; h]
    };
    forward_given_mask(cparams, nparams, &example.tokens, dropout_mask, rep_mode)
}

/// Weight applied to the classifier cross-entropy term of the de-noising
/// loss: beta * B(x) in the soft variant, beta * 1[B(x) > 0.5] in the hard
/// variant (strict inequality, so B(x) = 0.5 contributes nothing).
pub fn denoise_weight(variant: LossVariant, beta: f64, posterior: f64) -> f64 {
    match variant {
        LossVariant::Soft => beta * posterior,
        LossVariant::Hard => beta * f64::from(u8::from(posterior > 0.5)),
    }
}

/// De-noising loss: cross-entropy of the noise-head prediction plus the
/// weighted cross-entropy of the classifier prediction.
pub fn loss_denoise(
    trace: &ForwardTrace,
    noisy_label: usize,
    beta: f64,
    posterior: f64,
    variant: LossVariant,
) -> Result<f64, ModelError> {
    let noise = trace.noise.as_ref().ok_or(ModelError::MissingNoiseHead)?;
    let check_label = |len: usize| {
        if noisy_label >= len {
            Err(ModelError::LabelOutOfRange {
                label: noisy_label,
                classes: len,
            })
        } else {
            Ok(())
        }
    };
    check_label(noise.logits_n.len())?;
    check_label(trace.logits_c.len())?;
    let probs_n = softmax(&noise.logits_n).expect("non-empty logits");
    let ce_n = cross_entropy(&probs_n, noisy_label).expect("label checked");
    let probs_c = softmax(&trace.logits_c).expect("non-empty logits");
    let ce_c = cross_entropy(&probs_c, noisy_label).expect("label checked");
    Ok(ce_n + denoise_weight(variant, beta, posterior) * ce_c)
}

/// Gradients for every classifier tensor.
#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    pub embedding: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ClassifierGrads {
    pub fn zeros_like(params: &ClassifierParams) -> Self {
        ClassifierGrads {
            embedding: Matrix::zeros(params.embedding.rows(), params.embedding.cols()),
            w1: Matrix::zeros(params.w1.rows(), params.w1.cols()),
            b1: vec![0.0; params.b1.len()],
            w2: Matrix::zeros(params.w2.rows(), params.w2.cols()),
            b2: vec![0.0; params.b2.len()],
        }
    }

    pub fn accumulate(&mut self, other: &ClassifierGrads) {
        self.embedding.add_scaled(&other.embedding, 1.0);
        self.w1.add_scaled(&other.w1, 1.0);
        self.w2.add_scaled(&other.w2, 1.0);
        for (a, &b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, &b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.embedding.scale(s);
        self.w1.scale(s);
        self.w2.scale(s);
        for v in &mut self.b1 {
            *v *= s;
        }
        for v in &mut self.b2 {
            *v *= s;
        }
    }

    pub fn zero(&mut self) {
        self.embedding.fill(0.0);
        self.w1.fill(0.0);
        self.w2.fill(0.0);
        self.b1.fill(0.0);
        self.b2.fill(0.0);
    }
}

/// Gradients for every noise-head tensor.
#[derive(Debug, Clone)]
pub struct NoiseHeadGrads {
    pub v1: Matrix,
    pub c1: Vec<f64>,
    pub v2: Matrix,
    pub c2: Vec<f64>,
}

impl NoiseHeadGrads {
    pub fn zeros_like(params: &NoiseHeadParams) -> Self {
        NoiseHeadGrads {
            v1: Matrix::zeros(params.v1.rows(), params.v1.cols()),
            c1: vec![0.0; params.c1.len()],
            v2: Matrix::zeros(params.v2.rows(), params.v2.cols()),
            c2: vec![0.0; params.c2.len()],
        }
    }

    pub fn accumulate(&mut self, other: &NoiseHeadGrads) {
        self.v1.add_scaled(&other.v1, 1.0);
        self.v2.add_scaled(&other.v2, 1.0);
        for (a, &b) in self.c1.iter_mut().zip(&other.c1) {
            *a += b;
        }
        for (a, &b) in self.c2.iter_mut().zip(&other.c2) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.v1.scale(s);
        self.v2.scale(s);
        for v in &mut self.c1 {
            *v *= s;
        }
        for v in &mut self.c2 {
            *v *= s;
        }
    }

    pub fn zero(&mut self) {
        self.v1.fill(0.0);
        self.c1.fill(0.0);
        self.v2.fill(0.0);
        self.c2.fill(0.0);
    }
}

fn onehot_residual(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(logits).expect("non-empty logits");
    g[label] -= 1.0;
    g
}

/// Propagates a gradient on the classifier logits (plus an optional direct
/// gradient on the post-ReLU hidden layer) down to every classifier tensor.
fn classifier_backward(
    cparams: &ClassifierParams,
    trace: &ForwardTrace,
    d_logits_c: &[f64],
    d_hidden_post_extra: Option<&[f64]>,
    grads: &mut ClassifierGrads,
) {
    let hidden_dropped: Vec<f64> = trace
        .hidden_post
        .iter()
        .zip(&trace.dropout_mask)
        .map(|(&h, &m)| h * m)
        .collect();
    grads.w2.add_outer(&hidden_dropped, d_logits_c, 1.0);
    for (b, &g) in grads.b2.iter_mut().zip(d_logits_c) {
        *b += g;
    }
    let d_hidden_dropped = cparams.w2.matvec(d_logits_c);
    let mut d_hidden_post: Vec<f64> = d_hidden_dropped
        .iter()
        .zip(&trace.dropout_mask)
        .map(|(&g, &m)| g * m)
        .collect();
    if let Some(extra) = d_hidden_post_extra {
        for (a, &b) in d_hidden_post.iter_mut().zip(extra) {
            *a += b;
        }
    }
    // ReLU gate; post > 0 iff pre > 0.
    let d_hidden_pre: Vec<f64> = d_hidden_post
        .iter()
        .zip(&trace.hidden_post)
        .map(|(&g, &h)| if h > 0.0 { g } else { 0.0 })
        .collect();
    grads.w1.add_outer(&trace.mean_embedding, &d_hidden_pre, 1.0);
    for (b, &g) in grads.b1.iter_mut().zip(&d_hidden_pre) {
        *b += g;
    }
    let d_mean = cparams.w1.matvec(&d_hidden_pre);
    let inv_n = 1.0 / trace.tokens.len() as f64;
    for &t in &trace.tokens {
        let row = grads.embedding.row_mut(t);
        for (r, &g) in row.iter_mut().zip(&d_mean) {
            *r += g * inv_n;
        }
    }
}

/// Exact analytic gradients of the de-noising loss with respect to every
/// classifier and noise-head tensor. The cascade term flows through the
/// noise head into the representation and hence into the classifier; the
/// weighted clean term flows through the classifier only.
pub fn backward(
    cparams: &ClassifierParams,
    nparams: &NoiseHeadParams,
    trace: &ForwardTrace,
    noisy_label: usize,
    beta: f64,
    posterior: f64,
    variant: LossVariant,
) -> Result<(ClassifierGrads, NoiseHeadGrads), ModelError> {
    let mut cgrads = ClassifierGrads::zeros_like(cparams);
    let mut ngrads = NoiseHeadGrads::zeros_like(nparams);
    backward_into(
        cparams,
        nparams,
        trace,
        noisy_label,
        beta,
        posterior,
        variant,
        &mut cgrads,
        &mut ngrads,
    )?;
    Ok((cgrads, ngrads))
}

/// [`backward`] accumulating into caller-owned buffers; the training loop
/// reuses one pair of buffers per mini-batch instead of allocating
/// embedding-sized gradients per example.
#[allow(clippy::too_many_arguments)]
pub fn backward_into(
    cparams: &ClassifierParams,
    nparams: &NoiseHeadParams,
    trace: &ForwardTrace,
    noisy_label: usize,
    beta: f64,
    posterior: f64,
    variant: LossVariant,
    cgrads: &mut ClassifierGrads,
    ngrads: &mut NoiseHeadGrads,
) -> Result<(), ModelError> {
    let noise = trace.noise.as_ref().ok_or(ModelError::MissingNoiseHead)?;
    if noisy_label >= trace.logits_c.len() {
        return Err(ModelError::LabelOutOfRange {
            label: noisy_label,
            classes: trace.logits_c.len(),
        });
    }

    // Cascade term through the noise head.
    let d_logits_n = onehot_residual(&noise.logits_n, noisy_label);
    ngrads.v2.add_outer(&noise.noise_hidden, &d_logits_n, 1.0);
    for (b, &g) in ngrads.c2.iter_mut().zip(&d_logits_n) {
        *b += g;
    }
    let d_noise_hidden = nparams.v2.matvec(&d_logits_n);
    let d_noise_pre: Vec<f64> = d_noise_hidden
        .iter()
        .zip(&noise.noise_hidden)
        .map(|(&g, &h)| if h > 0.0 { g } else { 0.0 })
        .collect();
    ngrads.v1.add_outer(&noise.representation, &d_noise_pre, 1.0);
    for (b, &g) in ngrads.c1.iter_mut().zip(&d_noise_pre) {
        *b += g;
    }
    let d_rep = nparams.v1.matvec(&d_noise_pre);

    // Weighted clean term directly on the classifier logits.
    let weight = denoise_weight(variant, beta, posterior);
    let residual_c = onehot_residual(&trace.logits_c, noisy_label);
    let hidden_dim = trace.hidden_post.len();
    let (mut d_logits_c, d_hidden_extra): (Vec<f64>, Option<Vec<f64>>) =
        if d_rep.len() == trace.logits_c.len() {
            (d_rep, None)
        } else {
            // Concat representation: hidden part first, logits part second.
            let (hid, log) = d_rep.split_at(hidden_dim);
            (log.to_vec(), Some(hid.to_vec()))
        };
    for (d, &r) in d_logits_c.iter_mut().zip(&residual_c) {
        *d += weight * r;
    }
    classifier_backward(cparams, trace, &d_logits_c, d_hidden_extra.as_deref(), cgrads);
    Ok(())
}

/// Plain cross-entropy loss and gradients through the classifier only
/// (warmup phase and baseline arm). The noise head is untouched.
pub fn warmup_loss_and_grad(
    cparams: &ClassifierParams,
    trace: &ForwardTrace,
    noisy_label: usize,
) -> Result<(f64, ClassifierGrads), ModelError> {
    let mut grads = ClassifierGrads::zeros_like(cparams);
    let loss = warmup_loss_into(cparams, trace, noisy_label, &mut grads)?;
    Ok((loss, grads))
}

/// [`warmup_loss_and_grad`] accumulating into a caller-owned buffer.
pub fn warmup_loss_into(
    cparams: &ClassifierParams,
    trace: &ForwardTrace,
    noisy_label: usize,
    grads: &mut ClassifierGrads,
) -> Result<f64, ModelError> {
    if noisy_label >= trace.logits_c.len() {
        return Err(ModelError::LabelOutOfRange {
            label: noisy_label,
            classes: trace.logits_c.len(),
        });
    }
    let probs = softmax(&trace.logits_c).expect("non-empty logits");
    let loss = cross_entropy(&probs, noisy_label).expect("label checked");
    let mut d_logits = probs;
    d_logits[noisy_label] -= 1.0;
    classifier_backward(cparams, trace, &d_logits, None, grads);
    Ok(loss)
}

/// Eval-mode cross-entropy of the classifier prediction for one example
/// (used to record per-sample warmup losses).
pub fn classifier_loss_eval(
    cparams: &ClassifierParams,
    example: &Example,
    label: usize,
) -> Result<f64, ModelError> {
    let mask = vec![1.0; cparams.hidden_dim()];
    let trace = forward_given_mask(cparams, None, &example.tokens, mask, RepMode::Logits)?;
    let probs = softmax(&trace.logits_c).expect("non-empty logits");
    cross_entropy(&probs, label).map_err(|_| ModelError::LabelOutOfRange {
        label,
        classes: trace.logits_c.len(),
    })
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_class(logits: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"LNCKPT01";

/// Everything needed to reload a trained model and evaluate it standalone.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub rep_mode: RepMode,
    pub num_classes: usize,
    pub vocab: Vocab,
    pub classifier: ClassifierParams,
    pub noise_head: Option<NoiseHeadParams>,
}

fn write_f64s<W: Write>(out: &mut W, values: &[f64]) -> std::io::Result<()> {
    for &v in values {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn write_matrix<W: Write>(out: &mut W, m: &Matrix) -> std::io::Result<()> {
    out.write_u64::<LittleEndian>(m.rows() as u64)?;
    out.write_u64::<LittleEndian>(m.cols() as u64)?;
    write_f64s(out, m.as_slice())
}

fn write_vec<W: Write>(out: &mut W, v: &[f64]) -> std::io::Result<()> {
    out.write_u64::<LittleEndian>(v.len() as u64)?;
    write_f64s(out, v)
}

fn read_matrix<R: Read>(input: &mut R) -> Result<Matrix, ModelError> {
    let rows = input.read_u64::<LittleEndian>()? as usize;
    let cols = input.read_u64::<LittleEndian>()? as usize;
    let mut data = vec![0.0; rows * cols];
    for v in &mut data {
        *v = input.read_f64::<LittleEndian>()?;
    }
    Matrix::from_vec(rows, cols, data).map_err(|e| ModelError::BadCheckpoint(e.to_string()))
}

fn read_vec<R: Read>(input: &mut R) -> Result<Vec<f64>, ModelError> {
    let len = input.read_u64::<LittleEndian>()? as usize;
    let mut data = vec![0.0; len];
    for v in &mut data {
        *v = input.read_f64::<LittleEndian>()?;
    }
    Ok(data)
}

impl Checkpoint {
    /// Serializes to a versioned little-endian binary file; identical content
    /// always produces identical bytes.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ModelError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&self.config_hash)?;
        out.write_u8(match self.rep_mode {
            RepMode::Logits => 0,
            RepMode::Concat => 1,
        })?;
        out.write_u64::<LittleEndian>(self.num_classes as u64)?;
        out.write_f64::<LittleEndian>(self.classifier.dropout_rate)?;
        out.write_u64::<LittleEndian>(self.vocab.min_freq() as u64)?;
        out.write_u64::<LittleEndian>(self.vocab.len() as u64)?;
        for token in self.vocab.tokens() {
            let bytes = token.as_bytes();
            out.write_u64::<LittleEndian>(bytes.len() as u64)?;
            out.write_all(bytes)?;
        }
        write_matrix(&mut out, &self.classifier.embedding)?;
        write_matrix(&mut out, &self.classifier.w1)?;
        write_vec(&mut out, &self.classifier.b1)?;
        write_matrix(&mut out, &self.classifier.w2)?;
        write_vec(&mut out, &self.classifier.b2)?;
        match &self.noise_head {
            Some(np) => {
                out.write_u8(1)?;
                write_matrix(&mut out, &np.v1)?;
                write_vec(&mut out, &np.c1)?;
                write_matrix(&mut out, &np.v2)?;
                write_vec(&mut out, &np.c2)?;
            }
            None => out.write_u8(0)?,
        }
        out.flush()?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Checkpoint, ModelError> {
        let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadCheckpoint("wrong magic".to_string()));
        }
        let mut config_hash = [0u8; 32];
        input.read_exact(&mut config_hash)?;
        let rep_mode = match input.read_u8()? {
            0 => RepMode::Logits,
            1 => RepMode::Concat,
            other => {
                return Err(ModelError::BadCheckpoint(format!(
                    "unknown rep mode tag {other}"
                )))
            }
        };
        let num_classes = input.read_u64::<LittleEndian>()? as usize;
        let dropout_rate = input.read_f64::<LittleEndian>()?;
        let min_freq = input.read_u64::<LittleEndian>()? as usize;
        let vocab_len = input.read_u64::<LittleEndian>()? as usize;
        let mut tokens = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            let len = input.read_u64::<LittleEndian>()? as usize;
            let mut bytes = vec![0u8; len];
            input.read_exact(&mut bytes)?;
            tokens.push(String::from_utf8(bytes).map_err(|e| {
                ModelError::BadCheckpoint(format!("invalid token utf8: {e}"))
            })?);
        }
        let vocab = Vocab::from_tokens(tokens, min_freq);
        let embedding = read_matrix(&mut input)?;
        let w1 = read_matrix(&mut input)?;
        let b1 = read_vec(&mut input)?;
        let w2 = read_matrix(&mut input)?;
        let b2 = read_vec(&mut input)?;
        let classifier = ClassifierParams {
            embedding,
            w1,
            b1,
            w2,
            b2,
            dropout_rate,
        };
        let noise_head = match input.read_u8()? {
            0 => None,
            1 => Some(NoiseHeadParams {
                v1: read_matrix(&mut input)?,
                c1: read_vec(&mut input)?,
                v2: read_matrix(&mut input)?,
                c2: read_vec(&mut input)?,
            }),
            other => {
                return Err(ModelError::BadCheckpoint(format!(
                    "unknown noise-head tag {other}"
                )))
            }
        };
        Ok(Checkpoint {
            config_hash,
            rep_mode,
            num_classes,
            vocab,
            classifier,
            noise_head,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, Example};
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_example(tokens: Vec<usize>, label: usize) -> Example {
        Example {
            id: 0,
            tokens,
            noisy_label: label,
            clean_label: label,
            text: String::new(),
        }
    }

    fn toy_models(seed: u64, rep_mode: RepMode) -> (ClassifierParams, NoiseHeadParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (vocab, d, h, c) = (9, 4, 6, 3);
        let cparams = ClassifierParams::init(vocab, d, h, c, 0.0, &mut rng);
        let nparams = NoiseHeadParams::init(rep_mode.width(h, c), c, &mut rng);
        (cparams, nparams)
    }

    #[test]
    fn zero_params_give_uniform_prediction() {
        let cparams = ClassifierParams {
            embedding: Matrix::zeros(5, 4),
            w1: Matrix::zeros(4, 6),
            b1: vec![0.0; 6],
            w2: Matrix::zeros(6, 3),
            b2: vec![0.0; 3],
            dropout_rate: 0.0,
        };
        let ex = toy_example(vec![1, 2], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = forward(&cparams, None, &ex, Phase::Eval, RepMode::Logits, &mut rng).unwrap();
        let probs = softmax(&trace.logits_c).unwrap();
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let (cparams, nparams) = toy_models(3, RepMode::Logits);
        let ex = toy_example(vec![1, 5, 2], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t1 = forward(&cparams, Some(&nparams), &ex, Phase::Eval, RepMode::Logits, &mut rng)
            .unwrap();
        let t2 = forward(&cparams, Some(&nparams), &ex, Phase::Eval, RepMode::Logits, &mut rng)
            .unwrap();
        assert_eq!(t1.logits_c, t2.logits_c);
        assert_eq!(
            t1.noise.as_ref().unwrap().logits_n,
            t2.noise.as_ref().unwrap().logits_n
        );
    }

    #[test]
    fn mean_pooling_ignores_repetition() {
        let (cparams, _) = toy_models(4, RepMode::Logits);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let single = toy_example(vec![3], 0);
        let repeated = toy_example(vec![3, 3, 3, 3, 3], 0);
        let t1 = forward(&cparams, None, &single, Phase::Eval, RepMode::Logits, &mut rng).unwrap();
        let t2 =
            forward(&cparams, None, &repeated, Phase::Eval, RepMode::Logits, &mut rng).unwrap();
        for (a, b) in t1.mean_embedding.iter().zip(&t2.mean_embedding) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn token_out_of_range_errors() {
        let (cparams, _) = toy_models(4, RepMode::Logits);
        let ex = toy_example(vec![99], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            forward(&cparams, None, &ex, Phase::Eval, RepMode::Logits, &mut rng),
            Err(ModelError::TokenOutOfRange { token: 99, .. })
        ));
    }

    #[test]
    fn noise_head_width_is_four_times_input() {
        let (_, nparams) = toy_models(5, RepMode::Concat);
        assert_eq!(nparams.hidden_width(), 4 * nparams.rep_width());
    }

    #[test]
    fn loss_posterior_zero_is_cascade_only() {
        let (cparams, nparams) = toy_models(6, RepMode::Logits);
        let ex = toy_example(vec![1, 2, 3], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = forward(&cparams, Some(&nparams), &ex, Phase::Eval, RepMode::Logits, &mut rng)
            .unwrap();
        let full = loss_denoise(&trace, 2, 5.0, 0.0, LossVariant::Soft).unwrap();
        let probs_n = softmax(&trace.noise.as_ref().unwrap().logits_n).unwrap();
        let cascade = crate::numerics::cross_entropy(&probs_n, 2).unwrap();
        assert_eq!(full, cascade);
    }

    #[test]
    fn loss_beta_zero_reduces_both_variants_to_cascade() {
        let (cparams, nparams) = toy_models(8, RepMode::Concat);
        let ex = toy_example(vec![0, 4], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = forward(&cparams, Some(&nparams), &ex, Phase::Eval, RepMode::Concat, &mut rng)
            .unwrap();
        let soft = loss_denoise(&trace, 1, 0.0, 0.73, LossVariant::Soft).unwrap();
        let hard = loss_denoise(&trace, 1, 0.0, 0.73, LossVariant::Hard).unwrap();
        assert_eq!(soft, hard);
    }

    #[test]
    fn hard_variant_boundary_is_strict() {
        assert_eq!(denoise_weight(LossVariant::Hard, 4.0, 0.5), 0.0);
        assert_eq!(denoise_weight(LossVariant::Hard, 4.0, 0.5 + 1e-12), 4.0);
    }

    fn flatten(cparams: &ClassifierParams, nparams: &NoiseHeadParams) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend_from_slice(cparams.embedding.as_slice());
        flat.extend_from_slice(cparams.w1.as_slice());
        flat.extend_from_slice(&cparams.b1);
        flat.extend_from_slice(cparams.w2.as_slice());
        flat.extend_from_slice(&cparams.b2);
        flat.extend_from_slice(nparams.v1.as_slice());
        flat.extend_from_slice(&nparams.c1);
        flat.extend_from_slice(nparams.v2.as_slice());
        flat.extend_from_slice(&nparams.c2);
        flat
    }

    fn unflatten(
        flat: &[f64],
        like_c: &ClassifierParams,
        like_n: &NoiseHeadParams,
    ) -> (ClassifierParams, NoiseHeadParams) {
        let mut idx = 0usize;
        let mut take = |n: usize| {
            let s = flat[idx..idx + n].to_vec();
            idx += n;
            s
        };
        let cparams = ClassifierParams {
            embedding: Matrix::from_vec(
                like_c.embedding.rows(),
                like_c.embedding.cols(),
                take(like_c.embedding.rows() * like_c.embedding.cols()),
            )
            .unwrap(),
            w1: Matrix::from_vec(
                like_c.w1.rows(),
                like_c.w1.cols(),
                take(like_c.w1.rows() * like_c.w1.cols()),
            )
            .unwrap(),
            b1: take(like_c.b1.len()),
            w2: Matrix::from_vec(
                like_c.w2.rows(),
                like_c.w2.cols(),
                take(like_c.w2.rows() * like_c.w2.cols()),
            )
            .unwrap(),
            b2: take(like_c.b2.len()),
            dropout_rate: like_c.dropout_rate,
        };
        let nparams = NoiseHeadParams {
            v1: Matrix::from_vec(
                like_n.v1.rows(),
                like_n.v1.cols(),
                take(like_n.v1.rows() * like_n.v1.cols()),
            )
            .unwrap(),
            c1: take(like_n.c1.len()),
            v2: Matrix::from_vec(
                like_n.v2.rows(),
                like_n.v2.cols(),
                take(like_n.v2.rows() * like_n.v2.cols()),
            )
            .unwrap(),
            c2: take(like_n.c2.len()),
        };
        assert_eq!(idx, flat.len());
        (cparams, nparams)
    }

    fn flatten_grads(cgrads: &ClassifierGrads, ngrads: &NoiseHeadGrads) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend_from_slice(cgrads.embedding.as_slice());
        flat.extend_from_slice(cgrads.w1.as_slice());
        flat.extend_from_slice(&cgrads.b1);
        flat.extend_from_slice(cgrads.w2.as_slice());
        flat.extend_from_slice(&cgrads.b2);
        flat.extend_from_slice(ngrads.v1.as_slice());
        flat.extend_from_slice(&ngrads.c1);
        flat.extend_from_slice(ngrads.v2.as_slice());
        flat.extend_from_slice(&ngrads.c2);
        flat
    }

    /// Five-example batch loss of the de-noising objective as a pure function
    /// of the flattened parameter vector; the finite-difference oracle runs
    /// against this.
    fn batch_denoise_loss(
        flat: &[f64],
        like_c: &ClassifierParams,
        like_n: &NoiseHeadParams,
        batch: &[(Vec<usize>, usize, f64)],
        beta: f64,
        variant: LossVariant,
        rep_mode: RepMode,
        masks: &[Vec<f64>],
    ) -> f64 {
        let (cparams, nparams) = unflatten(flat, like_c, like_n);
        batch
            .iter()
            .zip(masks)
            .map(|((tokens, label, posterior), mask)| {
                let trace =
                    forward_given_mask(&cparams, Some(&nparams), tokens, mask.clone(), rep_mode)
                        .unwrap();
                loss_denoise(&trace, *label, beta, *posterior, variant).unwrap()
            })
            .sum()
    }

    #[test]
    fn grad_check_denoise_loss_both_rep_modes() {
        for (rep_mode, variant) in [
            (RepMode::Logits, LossVariant::Soft),
            (RepMode::Concat, LossVariant::Soft),
            (RepMode::Logits, LossVariant::Hard),
            (RepMode::Concat, LossVariant::Hard),
        ] {
            let (cparams, nparams) = toy_models(11, rep_mode);
            let batch: Vec<(Vec<usize>, usize, f64)> = vec![
                (vec![1, 2, 3], 0, 0.9),
                (vec![4, 5], 1, 0.1),
                (vec![6], 2, 0.7),
                (vec![7, 8, 1, 2], 1, 0.3),
                (vec![3, 3, 4], 0, 0.6),
            ];
            // Fixed dropout masks exercise the dropout backward path.
            let masks: Vec<Vec<f64>> = (0..batch.len())
                .map(|i| {
                    (0..cparams.hidden_dim())
                        .map(|j| if (i + j) % 3 == 0 { 0.0 } else { 1.0 / 0.7 })
                        .collect()
                })
                .collect();
            let beta = 2.5;
            let mut total_c = ClassifierGrads::zeros_like(&cparams);
            let mut total_n = NoiseHeadGrads::zeros_like(&nparams);
            for ((tokens, label, posterior), mask) in batch.iter().zip(&masks) {
                let trace = forward_given_mask(
                    &cparams,
                    Some(&nparams),
                    tokens,
                    mask.clone(),
                    rep_mode,
                )
                .unwrap();
                let (cg, ng) =
                    backward(&cparams, &nparams, &trace, *label, beta, *posterior, variant)
                        .unwrap();
                total_c.accumulate(&cg);
                total_n.accumulate(&ng);
            }
            let flat = flatten(&cparams, &nparams);
            let analytic = flatten_grads(&total_c, &total_n);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let err = grad_check(
                |p| {
                    batch_denoise_loss(p, &cparams, &nparams, &batch, beta, variant, rep_mode, &masks)
                },
                &flat,
                &analytic,
                80,
                &mut rng,
            );
            assert!(err < 1e-4, "{rep_mode} {variant:?}: max rel err {err}");
        }
    }

    #[test]
    fn grad_check_warmup_loss() {
        let (cparams, nparams) = toy_models(13, RepMode::Logits);
        let tokens = vec![2, 4, 6, 8];
        let label = 1usize;
        let mask = vec![1.0; cparams.hidden_dim()];
        let trace =
            forward_given_mask(&cparams, None, &tokens, mask.clone(), RepMode::Logits).unwrap();
        let (_, grads) = warmup_loss_and_grad(&cparams, &trace, label).unwrap();
        let flat = flatten(&cparams, &nparams);
        let mut analytic = flatten_grads(
            &grads,
            &NoiseHeadGrads::zeros_like(&nparams),
        );
        analytic.truncate(flat.len());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = grad_check(
            |p| {
                let (c, _) = unflatten(p, &cparams, &nparams);
                let t = forward_given_mask(&c, None, &tokens, mask.clone(), RepMode::Logits)
                    .unwrap();
                let probs = softmax(&t.logits_c).unwrap();
                crate::numerics::cross_entropy(&probs, label).unwrap()
            },
            &flat,
            &analytic,
            60,
            &mut rng,
        );
        assert!(err < 1e-4, "warmup grad err {err}");
    }

    #[test]
    fn beta_zero_backward_equals_cascade_only() {
        let (cparams, nparams) = toy_models(17, RepMode::Concat);
        let ex = toy_example(vec![1, 2, 5], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = forward(&cparams, Some(&nparams), &ex, Phase::Eval, RepMode::Concat, &mut rng)
            .unwrap();
        let (cg_zero, ng_zero) =
            backward(&cparams, &nparams, &trace, 2, 0.0, 0.8, LossVariant::Soft).unwrap();
        // Hard variant with posterior below threshold has the same weight 0.
        let (cg_hard, ng_hard) =
            backward(&cparams, &nparams, &trace, 2, 3.0, 0.2, LossVariant::Hard).unwrap();
        assert_eq!(flatten_grads(&cg_zero, &ng_zero), flatten_grads(&cg_hard, &ng_hard));
    }

    #[test]
    fn gradient_flow_decomposes_linearly() {
        let (cparams, nparams) = toy_models(19, RepMode::Logits);
        let ex = toy_example(vec![0, 3, 7], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = forward(&cparams, Some(&nparams), &ex, Phase::Eval, RepMode::Logits, &mut rng)
            .unwrap();
        let (beta, posterior) = (2.0, 0.75);
        let (cg_full, _) = backward(
            &cparams, &nparams, &trace, 1, beta, posterior, LossVariant::Soft,
        )
        .unwrap();
        let (cg_cascade, _) =
            backward(&cparams, &nparams, &trace, 1, 0.0, posterior, LossVariant::Soft).unwrap();
        let (_, cg_clean) = warmup_loss_and_grad(&cparams, &trace, 1).unwrap();
        let full = flatten_grads(&cg_full, &NoiseHeadGrads::zeros_like(&nparams));
        let cascade = flatten_grads(&cg_cascade, &NoiseHeadGrads::zeros_like(&nparams));
        let clean = flatten_grads(&cg_clean, &NoiseHeadGrads::zeros_like(&nparams));
        for ((f, c), k) in full.iter().zip(&cascade).zip(&clean) {
            let expected = c + beta * posterior * k;
            assert!(
                (f - expected).abs() < 1e-12,
                "decomposition mismatch: {f} vs {expected}"
            );
        }
    }

    #[test]
    fn train_mode_without_dropout_matches_eval() {
        let (cparams, nparams) = toy_models(23, RepMode::Logits);
        assert_eq!(cparams.dropout_rate, 0.0);
        let ex = toy_example(vec![2, 6], 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train =
            forward(&cparams, Some(&nparams), &ex, Phase::Train, RepMode::Logits, &mut rng)
                .unwrap();
        let eval = forward(&cparams, Some(&nparams), &ex, Phase::Eval, RepMode::Logits, &mut rng)
            .unwrap();
        assert_eq!(train.logits_c, eval.logits_c);
        assert_eq!(
            train.noise.as_ref().unwrap().logits_n,
            eval.noise.as_ref().unwrap().logits_n
        );
    }

    #[test]
    fn dropout_mask_entries_are_zero_or_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cparams = ClassifierParams::init(9, 4, 64, 3, 0.3, &mut rng);
        let ex = toy_example(vec![1, 2], 0);
        let trace =
            forward(&cparams, None, &ex, Phase::Train, RepMode::Logits, &mut rng).unwrap();
        let scale = 1.0 / 0.7;
        assert!(trace
            .dropout_mask
            .iter()
            .all(|&m| m == 0.0 || (m - scale).abs() < 1e-15));
        assert!(trace.dropout_mask.iter().any(|&m| m == 0.0));
        assert!(trace.dropout_mask.iter().any(|&m| m != 0.0));
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax_class(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax_class(&[1.0, 2.0, 2.0]), 1);
        assert_eq!(argmax_class(&[-1.0, -3.0]), 0);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (cparams, nparams) = toy_models(31, RepMode::Concat);
        let vocab = build_vocab(&["a b c d e f g h"], 1).unwrap();
        let ckpt = Checkpoint {
            config_hash: [7u8; 32],
            rep_mode: RepMode::Concat,
            num_classes: 3,
            vocab: vocab.clone(),
            classifier: cparams.clone(),
            noise_head: Some(nparams.clone()),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.config_hash, [7u8; 32]);
        assert_eq!(loaded.rep_mode, RepMode::Concat);
        assert_eq!(loaded.classifier, cparams);
        assert_eq!(loaded.noise_head.as_ref(), Some(&nparams));
        assert_eq!(loaded.vocab.tokens(), vocab.tokens());
        // Saving again produces identical bytes.
        let path2 = dir.path().join("model2.bin");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    proptest! {
        #[test]
        fn hard_equals_soft_with_indicator(
            beta in 0.0f64..10.0,
            posterior in 0.0f64..1.0,
            seed in 0u64..500,
        ) {
            let (cparams, nparams) = toy_models(seed, RepMode::Logits);
            let ex = toy_example(vec![1, 4, 2], (seed % 3) as usize);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let trace = forward(
                &cparams, Some(&nparams), &ex, Phase::Eval, RepMode::Logits, &mut rng,
            ).unwrap();
            let hard = loss_denoise(&trace, ex.noisy_label, beta, posterior, LossVariant::Hard)
                .unwrap();
            let indicator = f64::from(u8::from(posterior > 0.5));
            let soft = loss_denoise(&trace, ex.noisy_label, beta, indicator, LossVariant::Soft)
                .unwrap();
            prop_assert_eq!(hard.to_bits(), soft.to_bits());
        }
    }
}
