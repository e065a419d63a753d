//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(master seed, tag)` and
//! positioned on the ChaCha stream `index`, so any replicate or draw can be
//! regenerated independently of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used across the crate.
pub mod tags {
    pub const DATA: u64 = 0x6461_7461;
    pub const DRAWS: u64 = 0x6472_6177;
    pub const DRAWS_SECOND: u64 = 0x6472_6132;
    pub const BOOTSTRAP: u64 = 0x626f_6f74;
    pub const CHECK: u64 = 0x6368_6563;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(master: u64, label: u64) -> u64 {
    splitmix64(splitmix64(master) ^ label.rotate_left(17))
}

pub fn substream(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = splitmix64(master ^ splitmix64(tag));
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
