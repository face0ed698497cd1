//! Deterministic random streams.
//!
//! Every random draw in a run descends from one 64-bit seed. A stream is
//! addressed by a domain label and an index (e.g. `("scan", epoch)`), so the
//! draws a module sees do not depend on what other modules sampled first or
//! on execution order across parallel branches.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; good avalanche, used only for key derivation.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Root seed wrapper handed around by the supervisor and CLI.
#[derive(Debug, Clone, Copy)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for `(domain, index)`.
    pub fn stream(&self, domain: &str, index: u64) -> ChaCha8Rng {
        let key = splitmix64(self.seed ^ fnv1a(domain))
            ^ splitmix64(index.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(key));
        rng.set_stream(index.wrapping_add(0x5851f42d4c957f2d));
        rng
    }

    /// Child tree for batch runs (`--jobs`), one per mission index.
    pub fn child(&self, index: u64) -> SeedTree {
        SeedTree { seed: splitmix64(self.seed ^ splitmix64(index.wrapping_add(0xa076_1d64_78bd_642f))) }
    }
}
