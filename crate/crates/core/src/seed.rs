//! Seed derivation. Every random stream in a run descends from one root seed
//! through [`derive_seed`], so serial and parallel runs see identical draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for stream `index` under `root`: `splitmix64(root ^ splitmix64(index))`.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(index))
}

/// Derive along a path of indices, e.g. `[stage, step, item]`.
pub fn derive_path(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(root, |acc, &i| derive_seed(acc, i))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect()
}

/// Stream tags used with [`derive_path`].
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const AE_INIT: u64 = 2;
    pub const AE_TRAIN: u64 = 3;
    pub const UVIT_INIT: u64 = 4;
    pub const DIFF_TRAIN: u64 = 5;
    pub const ADAPTER_TRAIN: u64 = 6;
    pub const SUBJECT_TRAIN: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const HELDOUT: u64 = 10;
    pub const SUBJECT_DATA: u64 = 11;
    pub const PRIOR_DATA: u64 = 12;
}
