//! Core numerics for the initial-noise membership inference lab.
//!
//! Everything here is pure computation over `f64` vectors: noise schedules,
//! a small conditional noise-prediction network with hand-written reverse-mode
//! gradients, SGD training (with the memorization-score defense), DDIM
//! generation and inversion, the two-step attack and the evaluation metrics.
//! File formats, configuration and the command line live in the `noisemia-lab`
//! crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod attack;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod sampler;
pub mod schedule;
pub mod trainer;

mod vecmath;

pub use error::{Error, Result};

/// Deterministic generator used for every seeded draw in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Builds the crate's RNG from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// An independent ChaCha stream of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream);
    rng
}
