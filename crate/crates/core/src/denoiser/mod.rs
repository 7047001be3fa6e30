//! Denoisers: predictors of the clean target given a partially masked layout.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::diffusion::NoisyState;
use crate::{Error, Result};

pub mod checkpoint;
pub mod oracle;
pub mod tiny;

pub use oracle::OracleDenoiser;
pub use tiny::{Architecture, TinyDenoiser};

/// Log-probability used in place of `ln 0`. `exp` of it underflows to exactly 0.
pub const LOG_ZERO: f64 = -1.0e3;

const ROW_TOLERANCE: f64 = 1e-6;

/// Per target position natural-log probabilities over the vocabulary,
/// row-major with shape `rows x vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGrid {
    rows: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl LogitGrid {
    /// Wraps already-normalized log-probabilities, checking every row.
    pub fn from_log_probs(rows: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * vocab {
            return Err(Error::shape(format!("{rows}x{vocab}"), values.len()));
        }
        for (r, row) in values.chunks(vocab.max(1)).enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::contract(format!("row {r} has non-finite log-probabilities")));
            }
            let lse = log_sum_exp(row);
            if (lse).abs() > ROW_TOLERANCE {
                return Err(Error::contract(format!(
                    "row {r} is not normalized (log-sum-exp {lse:e})"
                )));
            }
        }
        let values = values.into_iter().map(|v| v.max(LOG_ZERO)).collect();
        Ok(LogitGrid { rows, vocab, values })
    }

    /// Normalizes raw scores row by row with log-sum-exp.
    pub fn from_scores(rows: usize, vocab: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * vocab {
            return Err(Error::shape(format!("{rows}x{vocab}"), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite scores"));
        }
        for row in values.chunks_mut(vocab.max(1)) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - lse).max(LOG_ZERO);
            }
        }
        Ok(LogitGrid { rows, vocab, values })
    }

    /// Builds a grid from probability rows.
    pub fn from_probs(rows: usize, vocab: usize, probs: &[f64]) -> Result<Self> {
        let logs = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { LOG_ZERO })
            .collect();
        Self::from_log_probs(rows, vocab, logs)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn log_prob(&self, i: usize, v: usize) -> f64 {
        self.values[i * self.vocab + v]
    }

    pub fn prob(&self, i: usize, v: usize) -> f64 {
        self.log_prob(i, v).exp()
    }

    pub fn probs_row(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|l| l.exp()).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Highest-probability token of row `i`, lowest id on ties.
    pub fn argmax(&self, i: usize) -> (usize, f64) {
        let row = self.row(i);
        let mut best = 0;
        for (v, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = v;
            }
        }
        (best, row[best].exp())
    }

    /// Most probable non-`<mask>` token of row `i` and its probability
    /// renormalized over non-mask tokens. Lowest id wins ties.
    pub fn argmax_unmasked(&self, i: usize) -> (usize, f64) {
        let row = self.row(i);
        let mask = crate::corpus::MASK as usize;
        let mut best = usize::MAX;
        let mut z = 0.0;
        for (v, &l) in row.iter().enumerate() {
            if v == mask {
                continue;
            }
            z += l.exp();
            if best == usize::MAX || l > row[best] {
                best = v;
            }
        }
        (best, row[best].exp() / z)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Anything that predicts per-position clean-token distributions for the
/// target region of a noisy layout.
///
/// Implementations must not depend on `state.t()`: the mask pattern alone
/// carries the noise level.
pub trait Denoiser: Sync {
    fn vocab_size(&self) -> usize;

    fn predict(&self, state: &NoisyState) -> Result<LogitGrid>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn predict(&self, state: &NoisyState) -> Result<LogitGrid> {
        (**self).predict(state)
    }
}

/// Wraps a denoiser and counts `predict` calls.
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        CountingDenoiser {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn predict(&self, state: &NoisyState) -> Result<LogitGrid> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict(state)
    }
}

/// Returns the same grid for every input. Useful as a fixed-point fixture.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser {
    pub grid: LogitGrid,
}

impl Denoiser for ConstantDenoiser {
    fn vocab_size(&self) -> usize {
        self.grid.vocab()
    }

    fn predict(&self, state: &NoisyState) -> Result<LogitGrid> {
        if state.target_len() != self.grid.rows() {
            return Err(Error::shape(self.grid.rows(), state.target_len()));
        }
        Ok(self.grid.clone())
    }
}
