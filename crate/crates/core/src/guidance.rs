//! Classifier-free guidance on x0-predictions.
//!
//! Per position, `log p_gamma = gamma * log p(x0 | x_t, y) + (1 - gamma) * log p(x0 | x_t) + c`,
//! with `c` absorbed by renormalizing each row. The unconditional pass feeds
//! the null condition: every condition token masked, separator kept.

use std::fmt;

use crate::denoiser::{Denoiser, LogitGrid, LOG_ZERO};
use crate::diffusion::NoisyState;
use crate::{Error, Result};

/// Guidance strength `gamma >= 0`; 1 disables guidance.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct GuidanceScale(f64);

impl GuidanceScale {
    pub const NONE: GuidanceScale = GuidanceScale(1.0);
    /// Setting used for the headline guided results.
    pub const DEFAULT: GuidanceScale = GuidanceScale(1.4);

    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::domain(format!("guidance scale {gamma} must be finite and >= 0")));
        }
        Ok(GuidanceScale(gamma))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_unguided(self) -> bool {
        self.0 == 1.0
    }
}

impl Default for GuidanceScale {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl fmt::Display for GuidanceScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Combines conditional and unconditional log-probabilities.
///
/// Tokens the conditional assigns zero probability stay at zero for any
/// `gamma > 0`.
pub fn cfg_combine(cond: &LogitGrid, uncond: &LogitGrid, gamma: GuidanceScale) -> Result<LogitGrid> {
    if cond.rows() != uncond.rows() || cond.vocab() != uncond.vocab() {
        return Err(Error::shape(
            format!("{}x{}", cond.rows(), cond.vocab()),
            format!("{}x{}", uncond.rows(), uncond.vocab()),
        ));
    }
    let g = gamma.value();
    if g == 1.0 {
        return Ok(cond.clone());
    }
    if g == 0.0 {
        return Ok(uncond.clone());
    }
    let scores = cond
        .values()
        .iter()
        .zip(uncond.values())
        .map(|(&c, &u)| {
            if c <= LOG_ZERO {
                LOG_ZERO
            } else {
                (g * c + (1.0 - g) * u).max(LOG_ZERO)
            }
        })
        .collect();
    LogitGrid::from_scores(cond.rows(), cond.vocab(), scores)
}

/// Guided x0-prediction. One denoiser call when `gamma == 1`, two otherwise.
pub fn guided_predict<D: Denoiser + ?Sized>(
    denoiser: &D,
    state: &NoisyState,
    gamma: GuidanceScale,
) -> Result<LogitGrid> {
    let cond = denoiser.predict(state)?;
    if gamma.is_unguided() {
        return Ok(cond);
    }
    let uncond = denoiser.predict(&state.with_null_condition())?;
    cfg_combine(&cond, &uncond, gamma)
}
