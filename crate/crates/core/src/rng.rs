//! Seeding policy.
//!
//! One master seed per experiment. Every independent stream (a generation
//! run, a training job, a world map) gets its own seed derived with
//! [`derive_seed`], a SplitMix64 mix of `(master, stream index)`. The mix is
//! fixed; changing it would change every derived artifact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

// stream tags, so that e.g. the world maps and the training shuffle never
// share a sequence even under the same master seed
pub mod stream {
    pub const WORLD: u64 = 1;
    pub const TRAIN_SPLIT: u64 = 2;
    pub const HELDOUT_SPLIT: u64 = 3;
    pub const AE_V: u64 = 10;
    pub const AE_A: u64 = 11;
    pub const DENOISER_V: u64 = 12;
    pub const DENOISER_A: u64 = 13;
    pub const BINDER: u64 = 14;
    pub const RUNS: u64 = 100;
}
