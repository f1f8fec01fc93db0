//! Counter-based seeded random streams.
//!
//! Every random operation draws from its own ChaCha stream identified by
//! `(seed, op_index)`, so any experiment is reproducible bit for bit and
//! independent operations never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Stream = ChaCha12Rng;

/// Opens stream `op_index` of `seed`.
pub fn stream(seed: u64, op_index: u64) -> Stream {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(op_index);
    rng
}

/// Hands out consecutive stream indices for one seed.
#[derive(Debug, Clone)]
pub struct StreamFactory {
    seed: u64,
    next: u64,
}

impl StreamFactory {
    pub fn new(seed: u64) -> Self {
        Self { seed, next: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_stream(&mut self) -> Stream {
        let s = stream(self.seed, self.next);
        self.next += 1;
        s
    }
}
