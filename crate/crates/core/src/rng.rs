//! Seeded random streams.
//!
//! Every random draw in the crate goes through a [`SeedStream`], a ChaCha
//! counter stream whose full state is (seed, word position). That makes any
//! run replayable from its seed and any checkpoint exact: restoring the word
//! position puts the stream back mid-sequence, bit for bit.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Vector;

/// A deterministic random stream with checkpointable state.
#[derive(Debug, Clone)]
pub struct SeedStream {
    rng: ChaCha8Rng,
    seed: [u8; 32],
}

impl PartialEq for SeedStream {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.rng.get_word_pos() == other.rng.get_word_pos()
    }
}

impl SeedStream {
    /// Creates a stream from a user-facing integer seed and a stream tag.
    ///
    /// The tag separates the streams of one run (parameter init, probe
    /// vectors, dataset noise, ...) so they never alias.
    pub fn new(seed: u64, tag: &str) -> Self {
        let seed = expand_seed(seed, tag);
        SeedStream { rng: ChaCha8Rng::from_seed(seed), seed }
    }

    /// A stream for one iteration of a seeded process: mixes the iteration
    /// index into the base seed so per-iteration draws are independent and
    /// addressable (batch regeneration needs random access by iteration).
    pub fn for_iteration(seed: u64, iteration: u64, tag: &str) -> Self {
        let mixed = splitmix64(seed ^ splitmix64(iteration ^ 0x517c_c1b7_2722_0a95));
        SeedStream::new(mixed, tag)
    }

    /// Restores a stream from checkpointed state.
    pub fn restore(seed: [u8; 32], word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        SeedStream { rng, seed }
    }

    /// The 32-byte expanded seed, for checkpointing.
    pub fn seed_bytes(&self) -> [u8; 32] {
        self.seed
    }

    /// Current position in the stream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One standard normal draw by the polar (Marsaglia) transform.
    ///
    /// The second value of each accepted pair is discarded so the stream
    /// state stays a pure function of the draw count.
    pub fn standard_normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Vector of `n` i.i.d. standard normal entries.
    pub fn standard_normal_vector(&mut self, n: usize) -> Result<Vector> {
        if n == 0 {
            return Err(Error::OutOfRange { what: "sample length", value: 0.0 });
        }
        Ok(Vector::from_fn(n, |_| self.standard_normal()))
    }

    /// Fills a slice with i.i.d. standard normal entries.
    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.standard_normal();
        }
    }
}

/// Expands (seed, tag) into 32 ChaCha key bytes via splitmix64.
fn expand_seed(seed: u64, tag: &str) -> [u8; 32] {
    let mut state = seed ^ fnv1a(tag.as_bytes());
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        chunk.copy_from_slice(&splitmix64(state).to_le_bytes());
    }
    out
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
