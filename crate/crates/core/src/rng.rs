//! Seeded random streams.
//!
//! Every replicate draws from its own ChaCha stream selected by the replicate
//! index, and each consumer inside a replicate (truth generation, sampling,
//! local search restarts, ...) gets a distinct key derived from the base seed.
//! Results therefore depend only on `(seed, replicate, purpose)`, never on the
//! order in which worker threads pick up replicates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type UqRng = ChaCha8Rng;

/// Consumer of a random stream inside one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Truth = 1,
    Data = 2,
    Search = 3,
    Calibration = 4,
    Pilot = 5,
    Null = 6,
    Alternative = 7,
    Prior = 8,
}

/// Rng for a bare seed, stream 0.
pub fn rng_from_seed(seed: u64) -> UqRng {
    UqRng::seed_from_u64(seed)
}

/// Rng keyed by `(seed, purpose)` on stream `replicate`.
pub fn stream_rng(seed: u64, replicate: u64, purpose: Purpose) -> UqRng {
    let key = splitmix64(seed ^ splitmix64(purpose as u64));
    let mut rng = UqRng::seed_from_u64(key);
    rng.set_stream(replicate);
    rng
}

/// Derive a child seed, e.g. for per-cell offsets.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed.wrapping_add(splitmix64(salt)))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
