//! Reproducible random streams.
//!
//! A [`Seed`] is a `(value, stream)` pair feeding a ChaCha12 generator: the
//! value is the key, the stream id selects one of 2^64 independent streams of
//! the same key. Deriving child seeds only moves the stream id, so every
//! consumer (f1 draws, f2 draws, splits, oracle, per-trial work) gets an
//! independent, reproducible stream from one master value.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Identifier of one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Seed {
    value: u64,
    stream: u64,
}

impl Seed {
    /// Seed with stream id 0.
    pub fn new(value: u64) -> Self {
        Self { value, stream: 0 }
    }

    pub fn with_stream(value: u64, stream: u64) -> Self {
        Self { value, stream }
    }

    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Child seed: same key, a stream id mixed from the current stream and `tag`.
    pub fn derive(&self, tag: u64) -> Seed {
        Seed {
            value: self.value,
            stream: splitmix(self.stream ^ splitmix(tag)),
        }
    }

    /// The generator for this stream. Identical `(value, stream)` always
    /// reproduces identical bytes.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.value);
        rng.set_stream(self.stream);
        rng
    }
}
