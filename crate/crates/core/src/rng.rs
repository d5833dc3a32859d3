//! Seeded randomness.
//!
//! Every stochastic choice draws from a tree of named streams rooted at one
//! user seed. A stream's generator is xoshiro256++ seeded through
//! splitmix64, so the same (seed, path) always yields the same sequence.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// A node in the seed tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream identified by `name`.
    pub fn substream(&self, name: &str) -> Self {
        Self {
            seed: splitmix64(self.seed ^ fnv1a(name.as_bytes())),
        }
    }

    /// Child stream identified by an index, e.g. a batch element.
    pub fn index(&self, i: u64) -> Self {
        Self {
            seed: splitmix64(self.seed.wrapping_add(splitmix64(i.wrapping_add(0x5851_f42d)))),
        }
    }

    pub fn rng(&self) -> Rng {
        Rng::seed_from_u64(self.seed)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Uniform integer in `lo..=hi`.
pub fn uniform_int(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

pub fn uniform(rng: &mut Rng) -> f64 {
    rng.gen::<f64>()
}
