//! Absorbing-state (masked) diffusion over the target region of a layout.
//!
//! Forward: each target token is independently replaced by `<mask>` with
//! probability `1 - alpha(t) = t`. Reverse, from `t` to `s < t`: a masked
//! position stays masked with probability `s / t` and otherwise unmasks to
//! `v` with probability `(t - s) / t * p(v | x_t)`; unmasked positions are
//! carried over unchanged.

use rand::Rng;

use crate::corpus::{TokenId, MASK, SEP};
use crate::denoiser::LogitGrid;
use crate::{Error, Result};

pub const DEFAULT_EPSILON_MIN: f64 = 1e-5;

/// Linear schedule `alpha(t) = 1 - t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub epsilon_min: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            epsilon_min: DEFAULT_EPSILON_MIN,
        }
    }
}

pub fn alpha(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("t = {t} outside [0, 1]")));
    }
    Ok(1.0 - t)
}

impl NoiseSchedule {
    pub fn new(epsilon_min: f64) -> Result<Self> {
        if !(epsilon_min > 0.0 && epsilon_min < 1.0) {
            return Err(Error::domain(format!("epsilon_min = {epsilon_min} outside (0, 1)")));
        }
        Ok(NoiseSchedule { epsilon_min })
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        alpha(t)
    }

    /// Training-time draw `t ~ U(epsilon_min, 1)`.
    pub fn sample_t<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.epsilon_min + (1.0 - self.epsilon_min) * rng.random::<f64>()
    }

    /// Masks each target token of `x0` with probability `1 - alpha(t)`.
    ///
    /// Exactly one uniform draw is consumed per target position.
    pub fn forward_mask<R: Rng + ?Sized>(
        &self,
        x0: &[TokenId],
        condition_len: usize,
        t: f64,
        rng: &mut R,
    ) -> Result<NoisyState> {
        if !(t >= self.epsilon_min && t <= 1.0) {
            return Err(Error::domain(format!(
                "t = {t} outside [{}, 1]",
                self.epsilon_min
            )));
        }
        if condition_len >= x0.len() {
            return Err(Error::contract(format!(
                "condition length {condition_len} leaves no target in a layout of {}",
                x0.len()
            )));
        }
        let keep = self.alpha(t)?;
        let mut tokens = x0.to_vec();
        for tok in &mut tokens[condition_len..] {
            if rng.random::<f64>() >= keep {
                *tok = MASK;
            }
        }
        NoisyState::new(tokens, condition_len, t)
    }
}

/// A layout at diffusion time `t`. Masked positions are exactly the target
/// positions holding `<mask>`; the condition region is never counted, even
/// when it holds the null condition.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyState {
    tokens: Vec<TokenId>,
    condition_len: usize,
    t: f64,
}

impl NoisyState {
    pub fn new(tokens: Vec<TokenId>, condition_len: usize, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("t = {t} outside [0, 1]")));
        }
        if condition_len > tokens.len() {
            return Err(Error::contract("condition longer than the layout"));
        }
        Ok(NoisyState {
            tokens,
            condition_len,
            t,
        })
    }

    /// Fully masked target of `target_len` after `condition`, at `t = 1`.
    pub fn fully_masked(condition: &[TokenId], target_len: usize) -> Self {
        let mut tokens = condition.to_vec();
        tokens.resize(condition.len() + target_len, MASK);
        NoisyState {
            tokens,
            condition_len: condition.len(),
            t: 1.0,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn condition_len(&self) -> usize {
        self.condition_len
    }

    pub fn condition(&self) -> &[TokenId] {
        &self.tokens[..self.condition_len]
    }

    pub fn target(&self) -> &[TokenId] {
        &self.tokens[self.condition_len..]
    }

    pub fn target_len(&self) -> usize {
        self.tokens.len() - self.condition_len
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.target()[i] == MASK
    }

    /// Target-relative indices of masked positions.
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.target_len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.target().iter().filter(|&&t| t == MASK).count()
    }

    pub fn with_t(&self, t: f64) -> Result<Self> {
        Self::new(self.tokens.clone(), self.condition_len, t)
    }

    /// Same target with `condition` substituted. Lengths must agree.
    pub fn with_condition(&self, condition: &[TokenId]) -> Result<Self> {
        if condition.len() != self.condition_len {
            return Err(Error::shape(self.condition_len, condition.len()));
        }
        let mut tokens = condition.to_vec();
        tokens.extend_from_slice(self.target());
        Self::new(tokens, self.condition_len, self.t)
    }

    /// The null condition: every condition token masked, separators kept.
    pub fn with_null_condition(&self) -> Self {
        let mut tokens = self.tokens.clone();
        for tok in &mut tokens[..self.condition_len] {
            if *tok != SEP {
                *tok = MASK;
            }
        }
        NoisyState {
            tokens,
            condition_len: self.condition_len,
            t: self.t,
        }
    }

    pub(crate) fn set_target(&mut self, i: usize, tok: TokenId) {
        self.tokens[self.condition_len + i] = tok;
    }
}

/// Descending decode grid `t = 1, (T-1)/T, ..., 1/T` with `s = t - 1/T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestepGrid {
    steps: usize,
}

impl TimestepGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::domain("decode needs at least one step"));
        }
        Ok(TimestepGrid { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `(t, s)` pairs. The last `s` is exactly 0.
    pub fn pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let n = self.steps;
        (0..n).map(move |j| ((n - j) as f64 / n as f64, (n - j - 1) as f64 / n as f64))
    }
}

/// Per target position distributions of the reverse kernel from `state.t()`
/// to `s`. Entry `MASK` of a masked position's row is the probability of
/// staying masked; unmasked positions are point masses on their token.
///
/// Any mass the prediction puts on `<mask>` itself is dropped and the row
/// renormalized, so `s = 0` always unmasks.
pub fn reverse_step_distribution(
    state: &NoisyState,
    s: f64,
    x0_logprobs: &LogitGrid,
) -> Result<Vec<Vec<f64>>> {
    let t = state.t();
    if !(s >= 0.0 && s < t) {
        return Err(Error::domain(format!("need 0 <= s < t, got s = {s}, t = {t}")));
    }
    if x0_logprobs.rows() != state.target_len() {
        return Err(Error::shape(
            format!("{} rows", state.target_len()),
            format!("{} rows", x0_logprobs.rows()),
        ));
    }
    let vocab = x0_logprobs.vocab();
    let stay = s / t;
    let unmask = (t - s) / t;
    let mut out = Vec::with_capacity(state.target_len());
    for (i, &tok) in state.target().iter().enumerate() {
        let mut row = vec![0.0; vocab];
        if tok == MASK {
            let mut probs = x0_logprobs.probs_row(i);
            probs[MASK as usize] = 0.0;
            let z: f64 = probs.iter().sum();
            if z <= 0.0 {
                return Err(Error::contract(format!(
                    "row {i} puts all of its mass on <mask>"
                )));
            }
            for (dst, p) in row.iter_mut().zip(&probs) {
                *dst = unmask * p / z;
            }
            row[MASK as usize] += stay;
        } else {
            row[tok as usize] = 1.0;
        }
        out.push(row);
    }
    Ok(out)
}

/// Inverse-CDF draw from a probability vector using one uniform.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Draws `x_s` given `x_t`. One uniform is consumed per masked position, in
/// position order; unmasked positions consume nothing.
pub fn sample_reverse_step<R: Rng + ?Sized>(
    state: &NoisyState,
    s: f64,
    x0_logprobs: &LogitGrid,
    rng: &mut R,
) -> Result<NoisyState> {
    let dists = reverse_step_distribution(state, s, x0_logprobs)?;
    sample_from_distributions(state, s, &dists, rng)
}

/// Draws `x_s` from precomputed reverse-kernel rows, with the same draw order
/// as [`sample_reverse_step`].
pub fn sample_from_distributions<R: Rng + ?Sized>(
    state: &NoisyState,
    s: f64,
    dists: &[Vec<f64>],
    rng: &mut R,
) -> Result<NoisyState> {
    if dists.len() != state.target_len() {
        return Err(Error::shape(state.target_len(), dists.len()));
    }
    let mut next = state.with_t(s)?;
    for (i, dist) in dists.iter().enumerate() {
        if state.is_masked(i) {
            let v = sample_categorical(dist, rng);
            next.set_target(i, v as TokenId);
        }
    }
    Ok(next)
}
