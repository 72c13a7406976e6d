//! Per-purpose deterministic RNG streams.
//!
//! Every random choice in a run draws from a ChaCha stream derived from the
//! run seed plus a fixed domain tag, so runs are reproducible and independent
//! of worker scheduling. No global RNG state anywhere.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_PAIRS: u64 = 2;
pub(crate) const STREAM_SAMPLING: u64 = 3;
pub(crate) const STREAM_CONTAMINATION: u64 = 4;
pub(crate) const STREAM_SPLIT: u64 = 5;
pub(crate) const STREAM_EVAL: u64 = 6;

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
