//! Knowledge-graph link prediction with a graph self-attention encoder.
//!
//! The crate is `no_std` (it needs `alloc`) and contains every numeric part of
//! the pipeline: a small reverse-mode differentiation tape, the relational
//! attention encoder, TransE / DistMult / ConvE decoders, 1-N training with
//! Adam and early stopping, filtered ranking metrics, and the self-training
//! loop that augments the training set with the model's own best guesses.
//!
//! File formats, configuration and the command line live in the `kbgsat`
//! companion crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod selftrain;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Deterministic generator used for initialisation, shuffling and dropout.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
