//! Named random streams derived from a master seed.
//!
//! A child stream is a ChaCha8 generator seeded with the master seed whose
//! stream id is the 64-bit FNV-1a hash of the label. Changing how one
//! component consumes randomness never perturbs another component's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const TRAJECTORY: &str = "trajectory";
pub const PARTICLES: &str = "particles";

pub fn fnv1a(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

pub fn derive_stream(master_seed: u64, label: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(fnv1a(label));
    rng
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
