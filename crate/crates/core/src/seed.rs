//! Deterministic seed derivation.
//!
//! Every random stream in a run is keyed by a path of integers hashed into a
//! 64-bit seed, so results never depend on the order in which branches,
//! steps or evaluations are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent uses of the same run seed apart.
pub mod stream {
    pub const TASK: u64 = 0x7441_534b;
    pub const EVAL_TASK: u64 = 0x4556_414c;
    pub const ROLLOUT: u64 = 0x524f_4c4c;
    pub const SELECT: u64 = 0x5345_4c45;
    pub const INIT: u64 = 0x494e_4954;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a root seed and a path of integers into a child seed.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(root), |acc, &p| {
        // multiply-then-add so that acc == splitmix64(p) cannot cancel
        splitmix64(
            acc.wrapping_mul(0x2545_f491_4f6c_dd1d)
                .wrapping_add(splitmix64(p)),
        )
    })
}

pub fn rng_from(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, path))
}
