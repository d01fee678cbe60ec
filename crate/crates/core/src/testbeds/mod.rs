//! Problem generators: synthetic streams, level-crossing reconstruction with
//! lapped orthogonal bases, and Poisson intensity estimation with hat splines.

pub mod lot;
pub mod nhpp;
pub mod synthetic;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for a seed and a stream label.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
