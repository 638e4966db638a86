//! Fisher-vector encoding with a learnable GMM vocabulary, fully connected
//! layers trained end-to-end against an eigenvalue-based LDA objective, and
//! single-shot retrieval evaluation (CMC, mAP).
//!
//! The crate is `no_std` and only needs an allocator. File formats, logging
//! sinks and the command-line driver live in the companion `fisherlda` crate.

#![no_std]

extern crate alloc;

pub mod dataset;
pub mod error;
pub mod evalrank;
pub mod fisher;
pub mod gmm;
pub mod lda;
pub mod linalg;
pub mod net;
pub mod trainer;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for one purpose of one seed. Distinct `stream`s give
/// independent sequences for the same seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub(crate) fn sq(x: f64) -> f64 {
    x * x
}
