//! Exact posterior denoiser for a known finite data distribution.
//!
//! Under the masking forward process every unmasked token equals the clean
//! token, and the masking probability is the same for every candidate, so
//! `p(x0 = c | x_t) ∝ w(c) * prod_{i unmasked} 1[x_t^i = c^i]`. Masked
//! condition positions (the null condition) impose no constraint, which makes
//! the same oracle exact for unconditional prediction too.

use crate::corpus::{LayoutSeq, MASK};
use crate::diffusion::NoisyState;
use crate::{Error, Result};

use super::{Denoiser, LogitGrid};

#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    atoms: Vec<LayoutSeq>,
    weights: Vec<f64>,
    vocab_size: usize,
}

impl OracleDenoiser {
    /// Weights are normalized; they must be positive.
    pub fn new(atoms: Vec<LayoutSeq>, weights: Vec<f64>, vocab_size: usize) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Empty("oracle corpus"));
        }
        if atoms.len() != weights.len() {
            return Err(Error::shape(atoms.len(), weights.len()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::contract("oracle weights must be positive"));
        }
        if let Some(bad) = atoms
            .iter()
            .flat_map(|a| &a.tokens)
            .find(|&&t| t as usize >= vocab_size || t == MASK)
        {
            return Err(Error::contract(format!("atom token {bad} invalid for vocab {vocab_size}")));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(OracleDenoiser {
            atoms,
            weights,
            vocab_size,
        })
    }

    /// Equal weight on every atom.
    pub fn uniform(atoms: Vec<LayoutSeq>, vocab_size: usize) -> Result<Self> {
        let n = atoms.len();
        Self::new(atoms, vec![1.0; n], vocab_size)
    }

    pub fn atoms(&self) -> &[LayoutSeq] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Normalized posterior weight of every atom given the observed tokens.
    /// Atoms whose layout dimensions differ from the state's get weight 0.
    pub fn atom_posterior(&self, state: &NoisyState) -> Result<Vec<f64>> {
        let mut post: Vec<f64> = self
            .atoms
            .iter()
            .zip(&self.weights)
            .map(|(atom, &w)| {
                let consistent = atom.condition_len == state.condition_len()
                    && atom.tokens.len() == state.tokens().len()
                    && atom
                        .tokens
                        .iter()
                        .zip(state.tokens())
                        .all(|(&a, &x)| x == MASK || a == x);
                if consistent {
                    w
                } else {
                    0.0
                }
            })
            .collect();
        let z: f64 = post.iter().sum();
        if z <= 0.0 {
            return Err(Error::NoSupport);
        }
        post.iter_mut().for_each(|p| *p /= z);
        Ok(post)
    }

    /// Per target position marginals of the posterior.
    pub fn oracle_posterior(&self, state: &NoisyState) -> Result<LogitGrid> {
        let post = self.atom_posterior(state)?;
        let rows = state.target_len();
        let mut probs = vec![0.0; rows * self.vocab_size];
        for (atom, &p) in self.atoms.iter().zip(&post) {
            if p == 0.0 {
                continue;
            }
            for (i, &tok) in atom.target().iter().enumerate() {
                probs[i * self.vocab_size + tok as usize] += p;
            }
        }
        LogitGrid::from_probs(rows, self.vocab_size, &probs)
    }
}

impl Denoiser for OracleDenoiser {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(&self, state: &NoisyState) -> Result<LogitGrid> {
        self.oracle_posterior(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{PAD, SEP};

    fn seq(tokens: Vec<u32>, condition_len: usize) -> LayoutSeq {
        let target_len = tokens.len() - condition_len;
        LayoutSeq {
            tokens,
            condition_len,
            target_len,
        }
    }

    #[test]
    fn single_atom_gives_point_mass() {
        let o = OracleDenoiser::uniform(vec![seq(vec![4, SEP, 5, 6, PAD], 2)], 8).unwrap();
        let st = NoisyState::fully_masked(&[4, SEP], 3);
        let g = o.predict(&st).unwrap();
        assert_eq!(g.prob(0, 5), 1.0);
        assert_eq!(g.prob(1, 6), 1.0);
        assert_eq!(g.prob(2, PAD as usize), 1.0);
    }

    #[test]
    fn two_atoms_split_evenly_at_the_differing_position() {
        // Bayes over two equally weighted atoms that differ only at target 1.
        let o = OracleDenoiser::uniform(
            vec![seq(vec![4, SEP, 5, 6], 2), seq(vec![4, SEP, 5, 7], 2)],
            8,
        )
        .unwrap();
        let st = NoisyState::new(vec![4, SEP, 5, MASK], 2, 0.5).unwrap();
        let g = o.predict(&st).unwrap();
        assert!((g.prob(1, 6) - 0.5).abs() < 1e-12);
        assert!((g.prob(1, 7) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_gives_conditional_marginals() {
        // Enumerate by hand: atoms with condition [4] carry weights 1 and 3.
        let atoms = vec![
            seq(vec![4, SEP, 5, 6], 2),
            seq(vec![4, SEP, 7, 6], 2),
            seq(vec![8, SEP, 5, 5], 2),
        ];
        let o = OracleDenoiser::new(atoms, vec![1.0, 3.0, 2.0], 9).unwrap();
        let g = o.predict(&NoisyState::fully_masked(&[4, SEP], 2)).unwrap();
        assert!((g.prob(0, 5) - 0.25).abs() < 1e-12);
        assert!((g.prob(0, 7) - 0.75).abs() < 1e-12);
        assert!((g.prob(1, 6) - 1.0).abs() < 1e-12);

        // Null condition: plain corpus marginals with weights 1/6, 3/6, 2/6.
        let null = NoisyState::fully_masked(&[4, SEP], 2).with_null_condition();
        let g = o.predict(&null).unwrap();
        assert!((g.prob(0, 5) - 0.5).abs() < 1e-12);
        assert!((g.prob(0, 7) - 0.5).abs() < 1e-12);
        assert!((g.prob(1, 5) - 2.0 / 6.0).abs() < 1e-12);
        assert!((g.prob(1, 6) - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn contradiction_is_an_error() {
        let o = OracleDenoiser::uniform(vec![seq(vec![4, SEP, 5, 6], 2)], 8).unwrap();
        let st = NoisyState::new(vec![4, SEP, 7, MASK], 2, 0.5).unwrap();
        assert!(matches!(o.predict(&st), Err(Error::NoSupport)));
    }

    #[test]
    fn output_ignores_t() {
        let o = OracleDenoiser::uniform(
            vec![seq(vec![4, SEP, 5, 6], 2), seq(vec![4, SEP, 7, 6], 2)],
            8,
        )
        .unwrap();
        let st = NoisyState::new(vec![4, SEP, MASK, 6], 2, 0.3).unwrap();
        assert_eq!(
            o.predict(&st).unwrap(),
            o.predict(&st.with_t(0.9).unwrap()).unwrap()
        );
    }
}
