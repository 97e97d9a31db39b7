//! Seeded, portable random source.
//!
//! The generator is ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`), seeded
//! from a `u64` through `SeedableRng::seed_from_u64` (a PCG32 expansion of the
//! seed into the 32-byte key). The stream is defined by the ChaCha block
//! function and does not depend on the host.
//!
//! Uniform variates take the top 53 bits of `next_u64`: `u = (x >> 11) · 2⁻⁵³`,
//! so `u ∈ [0, 1)`.
//!
//! Standard normals use the Box–Muller transform on consecutive uniform pairs
//! `(u₁, u₂)`: `r = √(−2 ln(1 − u₁))`, `z₀ = r cos(2πu₂)`, `z₁ = r sin(2πu₂)`.
//! A tensor is filled pairwise in row-major order; for an odd count the final
//! `z₁` is discarded. `ln`, `cos` and `sin` come from the pure-Rust `libm`
//! crate so the transform is bit-identical across platforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Single-owner random state.
#[derive(Clone, Debug)]
pub struct RngState {
    inner: ChaCha8Rng,
}

/// Serializable position of an [`RngState`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection, so every value is equally likely.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        (r * libm::cos(theta), r * libm::sin(theta))
    }

    /// One standard normal draw (consumes a full Box–Muller pair).
    pub fn normal(&mut self) -> f64 {
        self.normal_pair().0
    }

    /// Fills `out` with i.i.d. standard normals.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.normal_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.normal_pair().0;
        }
    }

    /// Tensor of i.i.d. N(0, 1) draws.
    pub fn standard_normal<T: Scalar>(&mut self, shape: impl Into<Vec<usize>>) -> Tensor<T> {
        let shape = shape.into();
        let mut buf = vec![0.0; shape.iter().product()];
        self.fill_normal(&mut buf);
        Tensor::new(shape, buf.into_iter().map(T::lit).collect()).expect("shape matches")
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            key: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Self {
        let mut inner = ChaCha8Rng::from_seed(snap.key);
        inner.set_stream(snap.stream);
        inner.set_word_pos(snap.word_pos);
        Self { inner }
    }
}
