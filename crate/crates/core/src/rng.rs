//! Deterministic, restorable random streams.
//!
//! Every randomness consumer (init, data order, masking, sampling, dropout,
//! head init) gets its own ChaCha stream derived from one run seed, so
//! consuming draws in one place never shifts another consumer's sequence.
//! Stream positions serialize exactly, which is what makes resumed runs
//! bit-identical to uninterrupted ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

/// Stream ids per consumer.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const MASK: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const HEAD_INIT: u64 = 6;
}

pub fn seeded(seed: u64, stream: u64) -> RunRng {
    let mut rng = RunRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Exact serializable position of a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &RunRng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> RunRng {
        let mut rng = RunRng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 + 16);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.stream.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != 56 {
            return None;
        }
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&bytes[..32]);
        let stream = u64::from_le_bytes(bytes[32..40].try_into().ok()?);
        let word_pos = u128::from_le_bytes(bytes[40..56].try_into().ok()?);
        Some(RngState {
            seed,
            stream,
            word_pos,
        })
    }
}

/// Standard normal truncated at two standard deviations, scaled by `stddev`.
pub fn truncated_normal(rng: &mut RunRng, stddev: f64) -> f64 {
    use rand::Rng as _;
    use rand_distr::StandardNormal;
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * stddev;
        }
    }
}
