//! Reproducible random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream addressed by
//! `(seed, domain, index, substream)`. Trajectory `i` always sees the same
//! numbers no matter how many workers run or in which order, so ensemble
//! output is a pure function of the seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent families of streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Fields = 1,
    Trajectory = 2,
    EtaChain = 3,
    SigmaPrivate = 4,
    Coins = 5,
    SliceSample = 6,
    Auxiliary = 7,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamFactory {
    seed: u64,
}

impl StreamFactory {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stream `(seed, domain, index, substream)`.
    pub fn stream(&self, domain: Domain, index: u64, substream: u64) -> Stream {
        let mut state = self.seed ^ (domain as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93);
        let mut key = [0u8; 32];
        // mix the index in between key words so (d, i) pairs never collide
        let mut words = [0u64; 4];
        words[0] = splitmix64(&mut state);
        state ^= index;
        words[1] = splitmix64(&mut state);
        words[2] = splitmix64(&mut state);
        words[3] = splitmix64(&mut state);
        for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(substream);
        Stream { rng }
    }

    pub fn trajectory(&self, index: u64) -> Stream {
        self.stream(Domain::Trajectory, index, 0)
    }
}

/// One reproducible random stream. Draw helpers consume exactly one 64-bit
/// word each so call sites have a fixed budget.
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    #[inline]
    pub fn next_word(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index in `0..n` by a single multiply-shift (no rejection loop).
    #[inline]
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.rng.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}
