//! Baseline decoders over the `TimestepGrid`: greedy confidence-ordered
//! unmasking (MaskGIT style) and stochastic ancestral sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::denoiser::Denoiser;
use crate::diffusion::{sample_reverse_step, NoisyState, TimestepGrid};
use crate::guidance::{guided_predict, GuidanceScale};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    GreedyTopk,
    Ancestral,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::GreedyTopk => "greedy_topk",
            DecodeMode::Ancestral => "ancestral",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy_topk" => Ok(DecodeMode::GreedyTopk),
            "ancestral" => Ok(DecodeMode::Ancestral),
            _ => Err(Error::Config(format!("unknown decode mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub steps: usize,
    pub target_len: usize,
    pub gamma: GuidanceScale,
    pub seed: u64,
    pub mode: DecodeMode,
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::domain("steps must be >= 1"));
        }
        if self.target_len == 0 {
            return Err(Error::domain("target_len must be >= 1"));
        }
        Ok(())
    }
}

/// Greedy decoding, returning the state after every step (the last is clean).
///
/// After the step ending at `s`, exactly `floor(L (1 - s))` positions are
/// committed. Committed positions always keep their slot; remaining slots go
/// to the most confident argmax predictions, lowest index first on ties.
pub fn greedy_topk_trajectory<D: Denoiser + ?Sized>(
    denoiser: &D,
    condition: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Vec<NoisyState>> {
    cfg.validate()?;
    let grid = TimestepGrid::new(cfg.steps)?;
    let l = cfg.target_len;
    let n = cfg.steps;
    let mut state = NoisyState::fully_masked(condition, l);
    let mut out = Vec::with_capacity(n);
    for (j, (_, s)) in grid.pairs().enumerate() {
        let x0 = guided_predict(denoiser, &state, cfg.gamma)?;
        // k = floor(L (1 - s)) with 1 - s = (j + 1) / T, in integers.
        let k = l * (j + 1) / n;
        let mut order: Vec<(bool, f64, usize, TokenId)> = (0..l)
            .map(|i| {
                if state.is_masked(i) {
                    let (tok, conf) = x0.argmax_unmasked(i);
                    (false, conf, i, tok as TokenId)
                } else {
                    (true, 1.0, i, state.target()[i])
                }
            })
            .collect();
        order.sort_by(|a, b| {
            b.0.cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = state.with_t(s)?;
        for &(committed, _, i, tok) in order.iter().take(k) {
            if !committed {
                next.set_target(i, tok);
            }
        }
        state = next;
        out.push(state.clone());
    }
    Ok(out)
}

pub fn greedy_topk_decode<D: Denoiser + ?Sized>(
    denoiser: &D,
    condition: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>> {
    let traj = greedy_topk_trajectory(denoiser, condition, cfg)?;
    Ok(traj.last().expect("at least one step").target().to_vec())
}

/// Ancestral sampling through the reverse kernel, returning every
/// intermediate state.
pub fn ancestral_trajectory<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    condition: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<NoisyState>> {
    cfg.validate()?;
    let grid = TimestepGrid::new(cfg.steps)?;
    let mut state = NoisyState::fully_masked(condition, cfg.target_len);
    let mut out = Vec::with_capacity(cfg.steps);
    for (_, s) in grid.pairs() {
        let x0 = guided_predict(denoiser, &state, cfg.gamma)?;
        state = sample_reverse_step(&state, s, &x0, rng)?;
        out.push(state.clone());
    }
    Ok(out)
}

pub fn ancestral_decode<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    condition: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let traj = ancestral_trajectory(denoiser, condition, cfg, rng)?;
    Ok(traj.last().expect("at least one step").target().to_vec())
}

/// Dispatches on `cfg.mode`; greedy mode ignores `rng`.
pub fn decode<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    condition: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    match cfg.mode {
        DecodeMode::GreedyTopk => greedy_topk_decode(denoiser, condition, cfg),
        DecodeMode::Ancestral => ancestral_decode(denoiser, condition, cfg, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MASK, SEP};
    use crate::denoiser::{ConstantDenoiser, LogitGrid};
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(steps: usize, target_len: usize, mode: DecodeMode) -> DecodeConfig {
        DecodeConfig {
            steps,
            target_len,
            gamma: GuidanceScale::NONE,
            seed: 0,
            mode,
        }
    }

    fn point_mass(target: &[u32], vocab: usize) -> ConstantDenoiser {
        let mut probs = vec![0.0; target.len() * vocab];
        for (i, &t) in target.iter().enumerate() {
            probs[i * vocab + t as usize] = 1.0;
        }
        ConstantDenoiser {
            grid: LogitGrid::from_probs(target.len(), vocab, &probs).unwrap(),
        }
    }

    fn random_denoiser(rows: usize, vocab: usize, seed: u64) -> ConstantDenoiser {
        let mut rng = seeded_rng(seed);
        let scores = (0..rows * vocab).map(|_| rng.random::<f64>() * 4.0).collect();
        ConstantDenoiser {
            grid: LogitGrid::from_scores(rows, vocab, scores).unwrap(),
        }
    }

    #[test]
    fn greedy_first_step_commits_two_of_ten() {
        let d = random_denoiser(10, 12, 3);
        let traj = greedy_topk_trajectory(&d, &[4, SEP], &cfg(5, 10, DecodeMode::GreedyTopk)).unwrap();
        assert_eq!(10 - traj[0].num_masked(), 2);
        assert_eq!(traj[0].t(), 0.8);
        let counts: Vec<usize> = traj.iter().map(|s| 10 - s.num_masked()).collect();
        assert_eq!(counts, vec![2, 4, 6, 8, 10]);
    }

    #[test]
    fn greedy_single_step_commits_everything() {
        let d = random_denoiser(6, 9, 1);
        let out = greedy_topk_decode(&d, &[4, SEP], &cfg(1, 6, DecodeMode::GreedyTopk)).unwrap();
        assert!(!out.contains(&MASK));
        let want: Vec<u32> = (0..6)
            .map(|i| {
                let row = d.grid.row(i);
                (0..9u32)
                    .filter(|&v| v != MASK)
                    .fold(0u32, |b, v| if row[v as usize] > row[b as usize] { v } else { b })
            })
            .collect();
        assert_eq!(out, want);
    }

    #[test]
    fn point_mass_reproduced_for_any_steps() {
        let target = [5, 6, 7, 5];
        let d = point_mass(&target, 9);
        for steps in 1..=6 {
            let c = cfg(steps, 4, DecodeMode::GreedyTopk);
            assert_eq!(greedy_topk_decode(&d, &[4, SEP], &c).unwrap(), target);
            let c = cfg(steps, 4, DecodeMode::Ancestral);
            assert_eq!(ancestral_decode(&d, &[4, SEP], &c, &mut seeded_rng(steps as u64)).unwrap(), target);
        }
    }

    #[test]
    fn greedy_ties_commit_lowest_index_first() {
        let d = point_mass(&[5, 5, 5, 5], 8);
        let traj = greedy_topk_trajectory(&d, &[4, SEP], &cfg(4, 4, DecodeMode::GreedyTopk)).unwrap();
        assert_eq!(traj[0].masked_positions(), vec![1, 2, 3]);
        assert_eq!(traj[1].masked_positions(), vec![2, 3]);
    }

    #[test]
    fn ancestral_is_seeded() {
        let d = random_denoiser(5, 10, 9);
        let c = cfg(3, 5, DecodeMode::Ancestral);
        let a = ancestral_decode(&d, &[4, SEP], &c, &mut seeded_rng(1)).unwrap();
        let b = ancestral_decode(&d, &[4, SEP], &c, &mut seeded_rng(1)).unwrap();
        assert_eq!(a, b);
        assert!(!a.contains(&MASK));
        let one = ancestral_trajectory(&d, &[4, SEP], &cfg(1, 5, DecodeMode::Ancestral), &mut seeded_rng(2)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].num_masked(), 0);
    }

    proptest! {
        #[test]
        fn commitments_are_monotone(
            seed in any::<u64>(),
            steps in 1usize..9,
            len in 1usize..9,
            greedy in any::<bool>(),
        ) {
            let d = random_denoiser(len, 7, seed);
            let mode = if greedy { DecodeMode::GreedyTopk } else { DecodeMode::Ancestral };
            let c = cfg(steps, len, mode);
            let traj = match mode {
                DecodeMode::GreedyTopk => greedy_topk_trajectory(&d, &[4, SEP], &c).unwrap(),
                DecodeMode::Ancestral => ancestral_trajectory(&d, &[4, SEP], &c, &mut seeded_rng(seed)).unwrap(),
            };
            let mut prev = NoisyState::fully_masked(&[4, SEP], len);
            for (j, st) in traj.iter().enumerate() {
                for i in 0..len {
                    if !prev.is_masked(i) {
                        prop_assert_eq!(st.target()[i], prev.target()[i]);
                    }
                }
                if greedy {
                    prop_assert_eq!(len - st.num_masked(), len * (j + 1) / steps);
                }
                prev = st.clone();
            }
            prop_assert_eq!(prev.num_masked(), 0);
        }
    }
}
