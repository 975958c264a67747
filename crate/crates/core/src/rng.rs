//! Counter-based seed splitting.
//!
//! Every replicate `k` of a Monte Carlo run draws from its own ChaCha8
//! stream, keyed by the master seed and selected by `k`. No generator state
//! is shared between replicates, so the mapping replicate -> random numbers
//! does not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the standard-normal generator used by every sampler in the crate.
/// Recorded in batch metadata; changing it changes every stream.
pub const NORMAL_METHOD: &str = "ziggurat (rand_distr::StandardNormal) over ChaCha8 streams";

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from `seed` for the purpose labelled `tag`.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Stable 64-bit tag for a textual purpose label (FNV-1a).
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Keyed family of independent streams.
#[derive(Debug, Clone)]
pub struct StreamFamily {
    key: [u8; 32],
}

impl StreamFamily {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_exact_mut(8) {
            s = mix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Self { key }
    }

    /// Generator for replicate `k`.
    pub fn stream(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(k);
        rng
    }
}
