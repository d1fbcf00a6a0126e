//! Reproducible random-number streams.
//!
//! A stream is keyed by a master seed and a hierarchical path of integers
//! (e.g. `[replicate, imputation, cluster]`). The ChaCha12 key is the
//! SHA-256 of the `(seed, path)` encoding, so identical keys reproduce the
//! same sequence on any platform and distinct paths give independent
//! streams. Splitting derives a child from the path alone, never from the
//! parent's consumption state, so parallel work keyed by disjoint paths is
//! bit-reproducible regardless of scheduling.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self::with_path(master_seed, &[])
    }

    pub fn with_path(master_seed: u64, path: &[u64]) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        for &p in path {
            hasher.update(p.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        Self {
            master_seed,
            path: path.to_vec(),
            rng: ChaCha12Rng::from_seed(seed),
        }
    }

    /// Child stream at `path ++ [child]`, independent of this stream's state.
    pub fn split(&self, child: u64) -> RngStream {
        let mut path = self.path.clone();
        path.push(child);
        Self::with_path(self.master_seed, &path)
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on the open interval (0, 1); safe to feed to the normal
    /// quantile.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
    }

    /// Uniform index in `0..n` by rejection, so every n is unbiased.
    pub fn uniform_index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }
}
