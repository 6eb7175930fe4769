//! Seeded random streams. Every consumer draws from its own named stream of
//! one experiment seed, so e.g. the data stream is unaffected by how many
//! parameters were initialised.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Float, Tensor};

pub type Rng = ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for `(seed, name)`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Tensor with i.i.d. `N(0, std^2)` entries.
pub fn normal_tensor<F: Float>(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::of(dist.sample(rng)))
}

/// Tensor with i.i.d. entries uniform on `[lo, hi)`.
pub fn uniform_tensor<F: Float>(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
    use rand::Rng as _;
    Tensor::from_fn(shape, |_| F::of(rng.random_range(lo..hi)))
}
