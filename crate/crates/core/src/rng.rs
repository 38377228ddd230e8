//! Seeded, platform-independent randomness.
//!
//! All randomness flows through [`RngState`], a ChaCha20 stream keyed by a
//! 64-bit seed. Independent substreams (per shard, per purpose) are derived
//! with [`RngState::derive`] so that results never depend on call
//! interleaving between unrelated consumers.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::TensorError;
use crate::tensor::Tensor;

pub const ALGORITHM: &str = "chacha20";

#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha20Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        ALGORITHM
    }

    /// Substream keyed by `(seed, label)`; does not advance `self`.
    pub fn derive(&self, label: &str) -> Self {
        Self::new(derive_seed(self.seed, label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// I.i.d. normal samples. `std == 0` yields the constant `mean` tensor
    /// without consuming the stream.
    pub fn gaussian(&mut self, shape: &[usize], mean: f64, std: f64) -> Result<Tensor, TensorError> {
        if !(std >= 0.0) || !std.is_finite() {
            return Err(TensorError::Parameter(format!(
                "gaussian std must be finite and >= 0, got {std}"
            )));
        }
        if std == 0.0 {
            return Ok(Tensor::full(shape, mean));
        }
        let dist = Normal::new(mean, std).map_err(|e| TensorError::Parameter(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.inner)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Normal samples truncated to `[-2 std, 2 std]` by rejection.
    pub fn truncated_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let z = self.standard_normal();
            if z.abs() <= 2.0 {
                data.push(z * std);
            }
        }
        Tensor::from_vec(shape, data).expect("shape/data length agree")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
