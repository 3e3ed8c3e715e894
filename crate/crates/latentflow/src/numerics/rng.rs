//! Seeded PRNG with named streams.
//!
//! Each consumer (weight init, data shuffling, latent sampling, scene
//! generation, ...) draws from its own stream derived from the base seed and
//! a stream name. Adding a consumer never perturbs the draws of existing
//! ones.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Factory for named, independent PRNG streams under one base seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    base_seed: u64,
}

impl RngStreams {
    pub fn new(base_seed: u64) -> Self {
        Self { base_seed }
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    /// Open the stream with the given name. Same (seed, name) -> identical
    /// sequence; distinct names -> independent sequences.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.base_seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

/// Standard-normal draw helper used by samplers.
pub fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let dist = rand_distr::StandardNormal;
    (0..n).map(|_| rng.sample::<f64, _>(dist)).collect()
}

/// Uniform draws in [lo, hi).
pub fn uniform_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}
