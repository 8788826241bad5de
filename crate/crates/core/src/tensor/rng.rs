//! Seeded counter-based randomness with named substreams.
//!
//! Built on ChaCha8: the 64-bit stream id separates consumers (data, noise,
//! dropout, init, ...) so adding draws to one purpose never shifts another
//! purpose's sequence. Identical seed + identical call sequence produces
//! identical bits on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

#[derive(Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(0);
        Rng { seed, stream: 0, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position within the current stream (counter-based).
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Fresh generator on a purpose-keyed stream of the same seed.
    pub fn substream(&self, purpose: &str) -> Rng {
        let stream = fnv1a(purpose.as_bytes());
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng { seed: self.seed, stream, inner }
    }

    /// Substream keyed by purpose and an index (per-stage, per-clip, ...).
    pub fn substream_indexed(&self, purpose: &str, index: u64) -> Rng {
        let stream = fnv1a(purpose.as_bytes()) ^ index.wrapping_mul(0x9e3779b97f4a7c15);
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng { seed: self.seed, stream, inner }
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    /// Uniform integer in [0, bound).
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below(0) is undefined");
        self.inner.random_range(0..bound)
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    pub fn fill_normal(&mut self, buf: &mut [f32]) {
        for v in buf.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        self.fill_normal(&mut data);
        Tensor::new(shape, data).expect("shape/data agree by construction")
    }

    /// Normal tensor scaled by `std`, as a trainable parameter.
    pub fn normal_param(&mut self, shape: &[usize], std: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        for v in data.iter_mut() {
            *v = self.normal() * std;
        }
        Tensor::param(shape, data).expect("shape/data agree by construction")
    }

    /// Kaiming-style init for a conv/linear weight with the given fan-in.
    pub fn kaiming_param(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let std = (2.0 / fan_in.max(1) as f32).sqrt();
        self.normal_param(shape, std)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
