//! Named, seeded random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is
//! derived from a run seed, a purpose tag and an index. Two runs that share a
//! seed therefore agree on every shuffle and initialization, and changing one
//! consumer (say, the number of epochs) never shifts another's stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed of the substream `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ fnv1a(tag)) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn substream(seed: u64, tag: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, tag, index))
}
