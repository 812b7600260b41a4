//! Seeded, stream-separated randomness.
//!
//! Every random draw in the crate goes through [`Rng`]. A generator is keyed by
//! `(seed, stream)` and backed by ChaCha8, which is counter based: draw `i` of a
//! stream can be reproduced directly with [`Rng::at`] on any platform.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Identifier of an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stream(pub u64);

impl Stream {
    pub const INIT: Stream = Stream::named("init");
    pub const DATA: Stream = Stream::named("data");
    pub const ROBUSTNESS: Stream = Stream::named("robustness");
    pub const HASH_ROUTER: Stream = Stream::named("hash-router");

    /// FNV-1a of the name.
    pub const fn named(name: &str) -> Stream {
        let bytes = name.as_bytes();
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut i = 0;
        while i < bytes.len() {
            hash ^= bytes[i] as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            i += 1;
        }
        Stream(hash)
    }
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    stream: Stream,
}

impl Rng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream.0);
        Self { inner, seed, stream }
    }

    /// The `index`-th 64-bit draw of `(seed, stream)`, without generating the
    /// draws before it.
    pub fn at(seed: u64, stream: Stream, index: u64) -> u64 {
        let mut rng = Rng::new(seed, stream);
        // Each u64 consumes two 32-bit words of the keystream.
        rng.inner.set_word_pos(u128::from(index) * 2);
        rng.inner.next_u64()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> Stream {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.random::<bool>()
    }
}
