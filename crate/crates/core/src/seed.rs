//! Counter-based splittable seed streams.
//!
//! Every random decision in the lab is drawn from a [`SeedStream`] derived
//! from a master seed by a path of labels and indices. Deriving a child is a
//! pure hash of the parent key, so the stream for prompt 17 is the same no
//! matter how many other prompts were processed before it or on which worker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A node in the seed derivation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream {
    key: u64,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_label(label: &str) -> u64 {
    // FNV-1a, then mixed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h)
}

impl SeedStream {
    pub fn new(master: u64) -> Self {
        Self {
            key: mix64(master ^ 0x6a09_e667_f3bc_c908),
        }
    }

    /// Child stream identified by a string label.
    pub fn derive(&self, label: &str) -> Self {
        Self {
            key: mix64(self.key.rotate_left(17) ^ hash_label(label)),
        }
    }

    /// Child stream identified by an index (prompt number, sample number, ...).
    pub fn index(&self, i: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(i.wrapping_add(0x9e37_79b9_7f4a_7c15))),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}
