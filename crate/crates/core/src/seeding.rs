//! Random streams. Every generator is a ChaCha8 keyed by a 64-bit seed with
//! the purpose selected by the ChaCha stream id, so streams never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Gradient = 1,
    Draws = 2,
    Estimate = 3,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Seed used by run `run_index` (0-based) of a multi-run fit.
pub fn run_seed(base: u64, run_index: usize) -> u64 {
    base.wrapping_add(run_index as u64)
}

pub const SCHEME: &str = "run r uses seed+r; each run keys ChaCha8 with its seed \
     and selects stream 0 for initialization, 1 for gradient noise, 2 for posterior draws, \
     3 for standalone ELBO estimates";
