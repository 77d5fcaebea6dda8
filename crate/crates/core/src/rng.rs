//! Per-purpose deterministic random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so reordering or parallelising one consumer cannot shift the
//! numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Batch = 3,
    Noise = 4,
    Timestep = 5,
    Probe = 6,
    Eval = 7,
    Codec = 8,
    Fixture = 9,
}

/// Builds the generator for `stream` under `seed`, optionally sub-indexed
/// (step number, sample index, ...).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | index);
    rng
}
