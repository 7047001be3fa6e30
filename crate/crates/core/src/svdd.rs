//! Soft-value diffusion decoding.
//!
//! At every step the guided reverse kernel proposes `M` candidates for
//! `x_s`. Each candidate is valued by the posterior-mean approximation: fill
//! its masks from the denoiser's x0-prediction, detokenize, embed, and take
//! the cosine similarity to the input sentence's embedding. The next state is
//! the best candidate (argmax mode) or an importance-weighted draw with
//! weights `exp(value / alpha)` (soft mode).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::corpus::{detokenize, TokenId, Vocab, MASK};
use crate::denoiser::Denoiser;
use crate::diffusion::{reverse_step_distribution, sample_categorical, sample_from_distributions, NoisyState, TimestepGrid};
use crate::guidance::{guided_predict, GuidanceScale};
use crate::sampler::DecodeConfig;
use crate::verifier::{cosine_reward, Embedder, EmbeddingVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Argmax,
    Soft { alpha: f64 },
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::Argmax => f.write_str("argmax"),
            Selection::Soft { .. } => f.write_str("soft"),
        }
    }
}

/// How the clean-data estimate used for scoring is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValueFill {
    /// Per-position argmax of the x0-prediction; deterministic.
    #[default]
    ArgmaxFill,
    /// One draw from the x0-prediction per masked position.
    SampleFill,
}

impl fmt::Display for ValueFill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueFill::ArgmaxFill => "argmax_fill",
            ValueFill::SampleFill => "sample_fill",
        })
    }
}

impl FromStr for ValueFill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax_fill" => Ok(ValueFill::ArgmaxFill),
            "sample_fill" => Ok(ValueFill::SampleFill),
            _ => Err(Error::Config(format!("unknown value fill `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvddConfig {
    pub m: usize,
    pub selection: Selection,
    pub value_fill: ValueFill,
}

impl Default for SvddConfig {
    fn default() -> Self {
        SvddConfig {
            m: 4,
            selection: Selection::Argmax,
            value_fill: ValueFill::ArgmaxFill,
        }
    }
}

impl SvddConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::domain("M must be >= 1"));
        }
        if let Selection::Soft { alpha } = self.selection {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::domain(format!("alpha = {alpha} must be > 0")));
            }
        }
        Ok(())
    }
}

/// The reward side of decoding: an embedder, the vocabulary for
/// detokenizing, and the input sentence's embedding.
pub struct Verifier<'a> {
    embedder: &'a dyn Embedder,
    vocab: &'a Vocab,
    input: EmbeddingVector,
}

impl<'a> Verifier<'a> {
    /// Embeds the detokenized condition content once.
    pub fn new(embedder: &'a dyn Embedder, vocab: &'a Vocab, condition: &[TokenId]) -> Result<Self> {
        let sentence = detokenize(condition, vocab)?;
        let input = embedder.embed(&sentence)?;
        Ok(Verifier {
            embedder,
            vocab,
            input,
        })
    }

    pub fn input_embedding(&self) -> &EmbeddingVector {
        &self.input
    }

    /// Rewards of already-clean target token sequences.
    pub fn score(&self, targets: &[Vec<TokenId>]) -> Result<Vec<(f64, String)>> {
        let sentences = targets
            .iter()
            .map(|t| detokenize(t, self.vocab))
            .collect::<Result<Vec<_>>>()?;
        let embs = self.embedder.embed_batch(&sentences)?;
        if embs.len() != sentences.len() {
            return Err(Error::Protocol("embedder returned the wrong count".into()));
        }
        embs.iter()
            .zip(sentences)
            .map(|(e, s)| Ok((cosine_reward(e, &self.input)?, s)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub state: NoisyState,
    pub value: f64,
    /// Clean-data estimate used for scoring; never contains `<mask>`.
    pub x0_fill: Vec<TokenId>,
    pub sentence: String,
}

/// Fills the masked positions of `state` from a guided x0-prediction.
pub fn pma_fill<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    state: &NoisyState,
    denoiser: &D,
    gamma: GuidanceScale,
    fill: ValueFill,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let x0 = guided_predict(denoiser, state, gamma)?;
    let mut out = state.target().to_vec();
    for (i, tok) in out.iter_mut().enumerate() {
        if *tok != MASK {
            continue;
        }
        *tok = match fill {
            ValueFill::ArgmaxFill => x0.argmax_unmasked(i).0 as TokenId,
            ValueFill::SampleFill => {
                let mut p = x0.probs_row(i);
                p[MASK as usize] = 0.0;
                sample_categorical(&p, rng) as TokenId
            }
        };
    }
    Ok(out)
}

/// Value of one candidate state: reward of its filled clean estimate.
pub fn value_pma<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    state: &NoisyState,
    denoiser: &D,
    gamma: GuidanceScale,
    verifier: &Verifier<'_>,
    fill: ValueFill,
    rng: &mut R,
) -> Result<Candidate> {
    let x0_fill = pma_fill(state, denoiser, gamma, fill, rng)?;
    let (value, sentence) = verifier.score(std::slice::from_ref(&x0_fill))?.remove(0);
    Ok(Candidate {
        state: state.clone(),
        value,
        x0_fill,
        sentence,
    })
}

/// Index of the highest value, lowest index on ties.
pub fn select_argmax(candidates: &[Candidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.value > candidates[best].value {
            best = i;
        }
    }
    Ok(best)
}

/// Draws an index with probability proportional to `exp(value / alpha)`.
/// A single candidate is returned without consuming randomness.
pub fn select_soft<R: Rng + ?Sized>(candidates: &[Candidate], alpha: f64, rng: &mut R) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("alpha = {alpha} must be > 0")));
    }
    if candidates.len() == 1 {
        return Ok(0);
    }
    let weights = soft_weights(candidates.iter().map(|c| c.value), alpha);
    Ok(sample_categorical(&weights, rng))
}

/// Normalized `exp(v / alpha)` weights, computed after subtracting the max.
pub fn soft_weights(values: impl Iterator<Item = f64> + Clone, alpha: f64) -> Vec<f64> {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.map(|v| ((v - max) / alpha).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Per-step record of a decode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: f64,
    pub s: f64,
    pub values: Vec<f64>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvddOutput {
    pub tokens: Vec<TokenId>,
    /// Value of the final selected candidate: the reward of the output.
    pub reward: f64,
    pub steps: Vec<StepTrace>,
}

/// Verifier-guided decoding.
///
/// Randomness is consumed per step in a fixed order: the `M` candidates are
/// drawn one after another (each position-major), then value fills (sample
/// mode only), then the soft selection draw (only when `M > 1`). With
/// `M = 1` the draws coincide with [`crate::sampler::ancestral_decode`].
pub fn svdd_decode<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    condition: &[TokenId],
    decode_cfg: &DecodeConfig,
    svdd_cfg: &SvddConfig,
    verifier: &Verifier<'_>,
    rng: &mut R,
) -> Result<SvddOutput> {
    decode_cfg.validate()?;
    svdd_cfg.validate()?;
    let grid = TimestepGrid::new(decode_cfg.steps)?;
    let gamma = decode_cfg.gamma;
    let mut state = NoisyState::fully_masked(condition, decode_cfg.target_len);
    let mut steps = Vec::with_capacity(decode_cfg.steps);
    let mut reward = 0.0;
    for (t, s) in grid.pairs() {
        let x0 = guided_predict(denoiser, &state, gamma)?;
        let dists = reverse_step_distribution(&state, s, &x0)?;
        let proposals = (0..svdd_cfg.m)
            .map(|_| sample_from_distributions(&state, s, &dists, rng))
            .collect::<Result<Vec<_>>>()?;
        let fills = proposals
            .iter()
            .map(|p| pma_fill(p, denoiser, gamma, svdd_cfg.value_fill, rng))
            .collect::<Result<Vec<_>>>()?;
        let scored = verifier.score(&fills)?;
        let candidates: Vec<Candidate> = proposals
            .into_iter()
            .zip(fills)
            .zip(scored)
            .map(|((state, x0_fill), (value, sentence))| Candidate {
                state,
                value,
                x0_fill,
                sentence,
            })
            .collect();
        let selected = match svdd_cfg.selection {
            Selection::Argmax => select_argmax(&candidates)?,
            Selection::Soft { alpha } => select_soft(&candidates, alpha, rng)?,
        };
        steps.push(StepTrace {
            t,
            s,
            values: candidates.iter().map(|c| c.value).collect(),
            selected,
        });
        reward = candidates[selected].value;
        state = candidates.into_iter().nth(selected).unwrap().state;
    }
    Ok(SvddOutput {
        tokens: state.target().to_vec(),
        reward,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SEP;
    use crate::denoiser::{ConstantDenoiser, CountingDenoiser, LogitGrid};
    use crate::sampler::{ancestral_decode, DecodeMode};
    use crate::seeded_rng;
    use crate::verifier::{ConstantEmbedder, HashedEmbedder};

    fn cand(value: f64) -> Candidate {
        Candidate {
            state: NoisyState::fully_masked(&[4, SEP], 1),
            value,
            x0_fill: vec![4],
            sentence: String::new(),
        }
    }

    #[test]
    fn argmax_selection() {
        let c: Vec<_> = [0.1, 0.9, 0.4].into_iter().map(cand).collect();
        assert_eq!(select_argmax(&c).unwrap(), 1);
        let c: Vec<_> = [0.3, 0.3, 0.3].into_iter().map(cand).collect();
        assert_eq!(select_argmax(&c).unwrap(), 0);
        assert_eq!(select_argmax(&[cand(-1.0)]).unwrap(), 0);
        assert!(select_argmax(&[]).is_err());
        assert!(select_soft(&[], 1.0, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn soft_selection_limits() {
        let mut rng = seeded_rng(1);
        let c: Vec<_> = [0.1, 0.5, 0.9, 0.2].into_iter().map(cand).collect();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_soft(&c, 1e9, &mut rng).unwrap()] += 1;
        }
        let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
        for k in counts {
            assert!((k as f64 / n as f64 - 0.25).abs() <= 3.0 * sigma);
        }

        let best = (0..10_000)
            .filter(|_| select_soft(&c, 1e-3, &mut rng).unwrap() == 2)
            .count();
        assert!(best as f64 / 10_000.0 > 0.999);
    }

    fn vocab() -> Vocab {
        Vocab::from_words(["a", "b", "c", "d"])
    }

    fn random_denoiser(rows: usize, seed: u64) -> ConstantDenoiser {
        let mut rng = seeded_rng(seed);
        let scores = (0..rows * 8).map(|_| rng.random::<f64>() * 3.0).collect();
        ConstantDenoiser {
            grid: LogitGrid::from_scores(rows, 8, scores).unwrap(),
        }
    }

    fn dcfg(steps: usize, len: usize, gamma: f64) -> DecodeConfig {
        DecodeConfig {
            steps,
            target_len: len,
            gamma: GuidanceScale::new(gamma).unwrap(),
            seed: 0,
            mode: DecodeMode::Ancestral,
        }
    }

    #[test]
    fn single_candidate_matches_ancestral_bit_for_bit() {
        let d = random_denoiser(5, 2);
        let v = vocab();
        let emb = HashedEmbedder { dim: 8, seed: 1 };
        let cond = [4, 5, SEP];
        let verifier = Verifier::new(&emb, &v, &cond).unwrap();
        for seed in 0..20 {
            let c = dcfg(4, 5, 1.0);
            let svdd_cfg = SvddConfig {
                m: 1,
                ..SvddConfig::default()
            };
            let a = svdd_decode(&d, &cond, &c, &svdd_cfg, &verifier, &mut seeded_rng(seed)).unwrap();
            let b = ancestral_decode(&d, &cond, &c, &mut seeded_rng(seed)).unwrap();
            assert_eq!(a.tokens, b);
        }
    }

    #[test]
    fn call_budget_and_dominance() {
        let d = CountingDenoiser::new(random_denoiser(4, 3));
        let v = vocab();
        let emb = HashedEmbedder { dim: 8, seed: 1 };
        let cond = [4, 6, SEP];
        let verifier = Verifier::new(&emb, &v, &cond).unwrap();
        for (steps, m) in [(1, 1), (3, 4), (5, 2)] {
            d.reset();
            let svdd_cfg = SvddConfig {
                m,
                ..SvddConfig::default()
            };
            let out = svdd_decode(&d, &cond, &dcfg(steps, 4, 1.0), &svdd_cfg, &verifier, &mut seeded_rng(7)).unwrap();
            assert_eq!(d.calls(), steps * (1 + m));
            for st in &out.steps {
                let max = st.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(st.values[st.selected], max);
            }
            assert!(!out.tokens.contains(&MASK));
        }
    }

    #[test]
    fn constant_verifier_values_are_equal() {
        let d = random_denoiser(3, 4);
        let v = vocab();
        let emb = ConstantEmbedder(EmbeddingVector(vec![1.0, 2.0]));
        let verifier = Verifier::new(&emb, &v, &[4, SEP]).unwrap();
        let out = svdd_decode(
            &d,
            &[4, SEP],
            &dcfg(3, 3, 1.0),
            &SvddConfig::default(),
            &verifier,
            &mut seeded_rng(0),
        )
        .unwrap();
        for st in &out.steps {
            assert!(st.values.iter().all(|&x| x == st.values[0]));
        }
    }

    #[test]
    fn value_of_a_clean_candidate_is_its_own_reward() {
        let d = random_denoiser(2, 5);
        let v = vocab();
        let emb = HashedEmbedder { dim: 16, seed: 3 };
        let verifier = Verifier::new(&emb, &v, &[4, 5, SEP]).unwrap();
        let st = NoisyState::new(vec![4, 5, SEP, 5, 4], 3, 0.0).unwrap();
        let c = value_pma(&st, &d, GuidanceScale::NONE, &verifier, ValueFill::ArgmaxFill, &mut seeded_rng(0)).unwrap();
        assert_eq!(c.x0_fill, vec![5, 4]);
        assert_eq!(c.sentence, "b a");
        // Same bag of words as the input "a b".
        assert!((c.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(SvddConfig { m: 0, ..SvddConfig::default() }.validate().is_err());
        let soft = SvddConfig {
            selection: Selection::Soft { alpha: 0.0 },
            ..SvddConfig::default()
        };
        assert!(soft.validate().is_err());
    }
}
