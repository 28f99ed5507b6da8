//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! 64-bit seed and a 64-bit stream id. The seed is first mixed with a
//! per-purpose domain constant (SplitMix64 finaliser) so that, for example,
//! dataset seed 7 and init seed 7 never share a keystream. Streams are
//! independent, which makes per-image generation order-free.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags mixed into seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Image = 0x5349_4453_494d_4731,
    Permutation = 0x5349_4453_5045_524d,
    Init = 0x5349_444d_494e_4954,
    Shuffle = 0x5349_444d_5348_5546,
    Search = 0x5349_444d_5345_4152,
    Patches = 0x5349_4442_5041_5443,
    Check = 0x5349_4447_4348_4b31,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for `(seed, stream)` within a purpose domain.
pub fn stream(domain: Domain, seed: u64, stream: u64) -> Rng {
    let key = splitmix64(seed ^ domain as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}
