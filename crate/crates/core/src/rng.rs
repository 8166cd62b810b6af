//! Seeded, named-stream randomness. Every source of randomness in the
//! artifact (parameter init, epoch shuffles, dropout masks, synthetic data)
//! draws from a stream derived from one master seed plus a stream name, so
//! runs are reproducible and adding a consumer never perturbs the others.

use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// FNV-1a, used only to map stream names onto ChaCha stream ids.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Factory for independent named random streams under one master seed.
#[derive(Clone, Copy, Debug)]
pub struct RngPool {
    seed: u64,
}

impl RngPool {
    pub fn new(seed: u64) -> Self {
        RngPool { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A fresh generator for `name`. Same (seed, name) → same stream.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }
}

/// Serializable position of a ChaCha stream, for checkpointing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn capture(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}

/// Standard normal draw via Box-Muller on two uniforms.
pub fn next_normal<S: Scalar>(rng: &mut ChaCha8Rng) -> S {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    let r = libm::sqrt(-2.0 * libm::log(u1));
    S::from_f64(r * libm::cos(2.0 * core::f64::consts::PI * u2))
}

/// `n` i.i.d. normal draws with the given standard deviation.
pub fn normal_vec<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, std_dev: f64) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64(next_normal::<f64>(rng) * std_dev))
        .collect()
}

/// Fisher-Yates shuffle of an index permutation.
pub fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
