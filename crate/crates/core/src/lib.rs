#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Masked discrete diffusion language modeling at desk scale.
//!
//! The crate trains tiny sequence-to-sequence denoisers on synthetic
//! style-transfer corpora and decodes them with greedy confidence
//! unmasking, ancestral sampling, classifier-free guidance and
//! verifier-guided soft-value search (SVDD).
//!
//! Every stochastic routine takes an explicit generator; nothing reads
//! global randomness.

pub mod cli;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod sampler;
pub mod svdd;
pub mod training;
pub mod verifier;

pub use error::{Error, Result};

/// The generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
