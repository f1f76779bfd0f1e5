//! Seeding conventions.
//!
//! All randomness comes from ChaCha8. A run seed `s` is expanded into
//! independent streams with [`stream`]: particle `i` of a Fleming-Viot
//! ensemble reads stream `i`, and the shared revival draws read
//! [`REVIVAL_STREAM`]. Independent Monte Carlo paths use the seeds `s ^ k`
//! (see [`path_seed`]), each on stream 0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream reserved for revival choices in particle systems.
pub const REVIVAL_STREAM: u64 = u64::MAX;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn path_seed(seed: u64, k: u64) -> u64 {
    seed ^ k
}

pub fn path_rng(seed: u64, k: u64) -> Rng {
    stream(path_seed(seed, k), 0)
}
