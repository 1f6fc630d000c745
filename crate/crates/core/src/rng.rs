//! Deterministic randomness.
//!
//! Two flavours are used throughout the crate:
//!
//! * a stateless counter-based generator ([`counter_uniform`]) keyed by
//!   `(seed, step, op_id, index)`, used for dropout masks so that the same
//!   element always receives the same draw regardless of evaluation order;
//! * named sub-streams ([`stream`]) derived from one root seed, each backed by
//!   a ChaCha8 generator. The derivation is
//!   `splitmix64(root ^ fnv1a64(name))`, so a component can be re-seeded
//!   independently by name.
//!
//! Stream names in use: `"scene"`, `"init"`, `"dropout"`, `"dn-noise"`,
//! `"sampling"`, `"bench"`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed of the named sub-stream of `root`.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a64(name))
}

/// A fresh generator for the named sub-stream of `root`.
pub fn stream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, name))
}

/// Uniform draw in `[0, 1)` addressed by a four-part counter.
#[inline]
pub fn counter_uniform(seed: u64, step: u64, op_id: u64, index: u64) -> f64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ step);
    h = splitmix64(h ^ op_id.rotate_left(17));
    h = splitmix64(h ^ index.rotate_left(41));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Address of one dropout site: all elements of an op share the key and are
/// distinguished by their flat index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub op_id: u64,
}

impl DropoutKey {
    pub fn new(seed: u64, step: u64, op_id: u64) -> Self {
        Self { seed, step, op_id }
    }

    /// Multiplicative factor for element `index`: `0` when dropped,
    /// `1 / (1 - p)` when kept.
    #[inline]
    pub fn factor(&self, p: f64, index: u64) -> f64 {
        if p <= 0.0 {
            return 1.0;
        }
        if counter_uniform(self.seed, self.step, self.op_id, index) < p {
            0.0
        } else {
            1.0 / (1.0 - p)
        }
    }
}
