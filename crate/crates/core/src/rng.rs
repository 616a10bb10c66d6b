//! Seed derivation and sampling helpers.
//!
//! Every random stream in a block is derived from one master seed, so a run
//! is reproducible from its config alone.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic child seed for a path of labels under `master`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Stream labels used with [`derive_seed`].
pub mod stream {
    pub const TASK: u64 = 1;
    pub const INIT_POLICY: u64 = 2;
    pub const TEST_SET: u64 = 3;
    pub const LEARNER: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const ENV_NOISE: u64 = 6;
}

/// Uniform samples in [−1, 1), shape `(rows, cols)`.
pub fn uniform_pm1<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || 2.0 * (rng.random::<f64>() - 0.5))
}
