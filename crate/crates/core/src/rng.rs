//! Splittable seeds. Every random stage derives its own ChaCha stream from a
//! key path such as (master seed, replication, stage), so results do not depend
//! on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stage tags used when deriving child seeds.
pub mod stage {
    pub const DATA: u64 = 0x4441_5441;
    pub const PILOT: u64 = 0x5049_4c54;
    pub const MAIN: u64 = 0x4d41_494e;
    pub const PERTURB: u64 = 0x5045_5254;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const COVARIATES: u64 = 0x434f_5641;
    pub const ERRORS: u64 = 0x4552_5253;
    pub const RESPONSE: u64 = 0x5245_5350;
    pub const MIXING: u64 = 0x4d49_5849;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(u64);

impl Seed {
    pub const fn new(master: u64) -> Self {
        Seed(master)
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Child seed for `tag`. Distinct tags give statistically independent streams.
    pub fn derive(self, tag: u64) -> Seed {
        Seed(splitmix64(splitmix64(self.0) ^ tag.rotate_left(17) ^ 0x6a09_e667_f3bc_c908))
    }

    /// Shorthand for `derive(a).derive(b)`.
    pub fn derive2(self, a: u64, b: u64) -> Seed {
        self.derive(a).derive(b)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed::new(v)
    }
}
