//! Keyed random streams.
//!
//! Every draw in a run comes from a ChaCha stream whose seed is a function of
//! `(master seed, purpose, a, b, c)`, so results do not depend on which worker
//! handles which particle or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ForecastPath = 1,
    JitterProposal = 2,
    Resample = 3,
    ObservationNoise = 4,
    InitialEnsemble = 5,
    TruthPath = 6,
    PriorPath = 7,
    Test = 8,
    Reliability = 9,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed and coordinates that together identify one random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub a: u64,
    pub b: u64,
    pub c: u64,
}

impl StreamKey {
    pub fn new(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> Self {
        Self { seed, purpose, a, b, c }
    }

    pub fn rng(&self) -> StreamRng {
        let mut state = self.seed;
        for word in [self.purpose as u64, self.a, self.b, self.c] {
            let mut s = state ^ word.wrapping_mul(0xD6E8_FEB8_6659_FD93);
            state = splitmix(&mut s);
        }
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }
}

/// Shorthand for `StreamKey::new(..).rng()`.
pub fn stream(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> StreamRng {
    StreamKey::new(seed, purpose, a, b, c).rng()
}
