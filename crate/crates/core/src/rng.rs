//! Deterministic seeding.
//!
//! A run has one master seed. Independent streams are derived from it by
//! seeding ChaCha8 with the master seed and selecting a fixed stream number
//! per purpose, so changing how much randomness one purpose consumes never
//! shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a derived random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization (base weights and adapters).
    Init = 1,
    /// Per-epoch shuffling of the training set.
    DataOrder = 2,
    /// Train / validation / test split assignment.
    Split = 3,
    /// Synthetic data generation.
    Data = 4,
    /// Adapter factor initialization.
    Adapter = 5,
}

pub fn stream(master: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(purpose as u64);
    rng
}

/// Stream for a sub-index of a purpose (e.g. epoch number for data order).
pub fn substream(master: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(purpose as u64);
    rng
}
