//! Seeded, named pseudo-random streams.
//!
//! All randomness in the artifact flows from a single 64-bit seed. Each
//! consumer derives an independent stream by name (e.g. "texture",
//! "noise", "projection"), so components can be reseeded without
//! perturbing each other.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the sub-seed for a named stream.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    splitmix64(root ^ fnv1a(name.as_bytes()))
}

/// A deterministic random stream identified by (root seed, name).
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(root: u64, name: &str) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(stream_seed(root, name)),
        }
    }

    /// Named stream with an extra integer discriminant (e.g. a step index).
    pub fn indexed(root: u64, name: &str, index: u64) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(splitmix64(stream_seed(root, name) ^ splitmix64(index))),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Standard normal via Box-Muller (always consumes two uniforms).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gaussian_vec<F: Real>(&mut self, n: usize) -> Vec<F> {
        (0..n).map(|_| F::lit(self.gaussian())).collect()
    }
}
