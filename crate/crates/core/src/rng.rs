//! Counter-based random streams.
//!
//! Every draw is addressed by `(seed, substream, path, cell)`. The pair
//! `(seed, substream)` is hashed into a ChaCha8 key, the path index selects the
//! ChaCha stream id, and each cell consumes exactly two 64-bit words. The word
//! position of a cell is therefore a pure function of its index, so any cell can
//! be regenerated in isolation and results never depend on how paths are split
//! across workers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// 64-bit words consumed by one cell.
pub const WORDS_PER_CELL: u64 = 2;

/// Poisson means below this use inversion; at or above it the PTRS sampler.
pub const POISSON_INVERSION_LIMIT: f64 = 10.0;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named, disjoint family of streams derived from one top-level seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Substream(pub u64);

impl Substream {
    pub const BROWNIAN: Substream = Substream(0x0b0b_0001);
    pub const JUMPS: Substream = Substream(0x0b0b_0002);
    pub const ZETA: Substream = Substream(0x0b0b_0003);
    pub const SAMPLER: Substream = Substream(0x0b0b_0004);

    /// FNV-1a of the name, so substreams can be created from labels in configs.
    pub fn named(name: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Substream(h)
    }

    /// Child substream, e.g. one per window of a chained solve.
    pub fn indexed(self, index: u64) -> Self {
        Substream(splitmix64(self.0 ^ splitmix64(index.wrapping_add(0x5151))))
    }
}

/// Key for one `(seed, substream)` family.
#[derive(Clone, Debug)]
pub struct StreamKey {
    key: [u8; 32],
}

impl StreamKey {
    pub fn new(seed: u64, sub: Substream) -> Self {
        let mut key = [0u8; 32];
        let mut state = splitmix64(seed) ^ splitmix64(sub.0.rotate_left(17));
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        StreamKey { key }
    }

    pub fn path(&self, path: u64) -> PathStream {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(path);
        PathStream { rng }
    }
}

/// Sequential reader over the cells of one path.
#[derive(Clone, Debug)]
pub struct PathStream {
    rng: ChaCha8Rng,
}

impl PathStream {
    /// Position the stream at the start of `cell`.
    pub fn seek_cell(&mut self, cell: u64) {
        // word_pos counts 32-bit words
        self.rng
            .set_word_pos(u128::from(cell) * u128::from(WORDS_PER_CELL) * 2);
    }

    pub fn next_cell(&mut self) -> [u64; 2] {
        [self.rng.next_u64(), self.rng.next_u64()]
    }

    /// Uniform on the open interval (0, 1); consumes one cell.
    pub fn uniform(&mut self) -> f64 {
        to_open_unit(self.next_cell()[0])
    }

    /// Standard normal by Box-Muller (cosine branch); consumes one cell.
    pub fn normal(&mut self) -> f64 {
        let [a, b] = self.next_cell();
        let u1 = to_open_unit(a);
        let u2 = to_open_unit(b);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Poisson count with the given mean; consumes one cell.
    pub fn poisson(&mut self, mean: f64) -> u32 {
        let cell = self.next_cell();
        poisson_from_cell(cell, mean)
    }
}

pub fn to_open_unit(w: u64) -> f64 {
    ((w >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

fn poisson_from_cell(cell: [u64; 2], mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    if mean < POISSON_INVERSION_LIMIT {
        let u = to_open_unit(cell[0]);
        let mut k = 0u32;
        let mut p = (-mean).exp();
        let mut cdf = p;
        while u > cdf && k < 1000 {
            k += 1;
            p *= mean / f64::from(k);
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        k
    } else {
        let mut local = ChaCha8Rng::seed_from_u64(cell[0] ^ splitmix64(cell[1]));
        let dist = Poisson::new(mean).expect("finite positive Poisson mean");
        dist.sample(&mut local) as u32
    }
}
