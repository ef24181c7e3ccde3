//! Stable seed derivation.
//!
//! Every PRNG stream in the crate is keyed by a tuple such as
//! `(seed, scene_index)` or `(global_seed, image_id, variant)`. The mixing below
//! is fixed (FNV-1a followed by a SplitMix64 finalizer) so derived seeds are the
//! same on every platform and every run, independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Incremental builder for a derived seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedKey(u64);

impl SeedKey {
    pub fn new(root: u64) -> Self {
        let mut key = SeedKey(FNV_OFFSET);
        key = key.with_u64(root);
        key
    }

    pub fn with_bytes(mut self, bytes: &[u8]) -> Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
        // length separator so ("ab","c") and ("a","bc") differ
        self.0 ^= bytes.len() as u64;
        self.0 = self.0.wrapping_mul(FNV_PRIME);
        self
    }

    pub fn with_u64(self, v: u64) -> Self {
        self.with_bytes(&v.to_le_bytes())
    }

    pub fn with_str(self, s: &str) -> Self {
        self.with_bytes(s.as_bytes())
    }

    pub fn finish(self) -> u64 {
        splitmix64(self.0)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.finish())
    }
}
