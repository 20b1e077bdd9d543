//! Reproducible weight initialization.
//!
//! All randomness flows through ChaCha8 seeded from a `u64`; its output
//! stream is specified independently of platform and word size, so the
//! same seed yields the same weights everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Restores a generator from its seed and stream position.
pub fn restore(seed: [u8; 32], word_pos: u128) -> Rng {
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    rng
}

pub fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let len = shape.iter().product();
    let data = (0..len).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}
