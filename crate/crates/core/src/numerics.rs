//! Dense numeric kernels shared by the rest of the crate: a small row-major
//! matrix, softmax/cross-entropy primitives, the Adam optimizer, and a
//! finite-difference gradient checker used as the backprop oracle in tests.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("empty logits")]
    EmptyLogits,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Seeded uniform fill in [-bound, bound].
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// x . A for a row vector x of length `rows`; returns a vector of length `cols`.
    pub fn vecmat(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "vecmat input length");
        let mut out = vec![0.0; self.cols];
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = self.row(r);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xv * w;
            }
        }
        out
    }

    /// A . y for a column vector y of length `cols`; returns a vector of length `rows`.
    pub fn matvec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.cols, "matvec input length");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(y).map(|(&w, &v)| w * v).sum())
            .collect()
    }

    /// A += scale * outer(x, y) with x of length `rows`, y of length `cols`.
    pub fn add_outer(&mut self, x: &[f64], y: &[f64], scale: f64) {
        assert_eq!(x.len(), self.rows, "add_outer x length");
        assert_eq!(y.len(), self.cols, "add_outer y length");
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = self.row_mut(r);
            for (w, &yv) in row.iter_mut().zip(y) {
                *w += scale * xv * yv;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.data.len(), other.data.len(), "add_scaled shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable softmax (max-subtraction before exponentiation).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::EmptyLogits);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Probability floor inside the cross-entropy log; keeps saturated softmax
/// outputs from producing infinite loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// -log(probs[label]) with the probability clamped to at least [`PROB_CLAMP`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64, NumericsError> {
    if label >= probs.len() {
        return Err(NumericsError::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    Ok(-probs[label].max(PROB_CLAMP).ln())
}

/// Adam optimizer state for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction. `params` and `grads` must match the
/// state's shape; `state.t` advances by exactly one.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
) -> Result<(), NumericsError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NumericsError::ShapeMismatch {
            expected: state.m.len(),
            got: if params.len() != state.m.len() {
                params.len()
            } else {
                grads.len()
            },
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Central finite-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares analytic gradients against central finite differences on `probes`
/// randomly chosen coordinates and returns the maximum relative error
/// max(|a - n| / max(|a|, |n|, 1e-8)). Callers assert on the result.
pub fn grad_check<F, R>(
    mut loss_fn: F,
    params: &[f64],
    analytic: &[f64],
    probes: usize,
    rng: &mut R,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
    R: Rng,
{
    assert_eq!(params.len(), analytic.len(), "grad_check shapes");
    assert!(probes >= 1, "grad_check needs at least one probe");
    let mut scratch = params.to_vec();
    let mut max_err = 0.0f64;
    for _ in 0..probes {
        let i = rng.random_range(0..params.len());
        let orig = scratch[i];
        scratch[i] = orig + GRAD_CHECK_STEP;
        let plus = loss_fn(&scratch);
        scratch[i] = orig - GRAD_CHECK_STEP;
        let minus = loss_fn(&scratch);
        scratch[i] = orig;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    max_err
}
