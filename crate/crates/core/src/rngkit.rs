//! Seed derivation and isolated random streams.
//!
//! Every stochastic decision in a simulation draws from an [`RngStream`]
//! seeded by [`derive_seed`], so the values a client sees depend only on
//! `(base_seed, domain, client_id, round)` and never on which worker thread
//! runs the client or when.
//!
//! Every operation consumes a number of 64-bit draws that depends only on
//! input sizes, never on drawn values. [`RngStream::consumed`] exposes the
//! running count so tests can audit it.

use crate::{Error, Result};

const MIX_DOMAIN: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_CLIENT: u64 = 0xC2B2_AE3D_27D4_EB4F;
const MIX_ROUND: u64 = 0x1656_67B1_9E37_79F9;
const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Purpose tag mixed into every derived seed. The discriminants are part of
/// the on-disk reproducibility contract and must never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum SeedDomain {
    ServerInit = 1,
    ClientSampling = 2,
    ClientShuffle = 3,
    ClientAugment = 4,
    ClientDropout = 5,
    /// Reserved. Evaluation never shuffles, so nothing draws from it today.
    EvalShuffle = 6,
}

impl SeedDomain {
    pub const ALL: [SeedDomain; 6] = [
        SeedDomain::ServerInit,
        SeedDomain::ClientSampling,
        SeedDomain::ClientShuffle,
        SeedDomain::ClientAugment,
        SeedDomain::ClientDropout,
        SeedDomain::EvalShuffle,
    ];

    pub const fn tag(self) -> u64 {
        self as u64
    }
}

/// SplitMix64 output function.
#[inline]
pub const fn splitmix_finalize(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Derives the seed for one `(domain, client, round)` slot of an experiment.
pub const fn derive_seed(base_seed: u64, domain: SeedDomain, client_id: u64, round: u64) -> u64 {
    let mut x = splitmix_finalize(base_seed ^ domain.tag().wrapping_mul(MIX_DOMAIN));
    x = splitmix_finalize(x ^ client_id.wrapping_mul(MIX_CLIENT));
    splitmix_finalize(x ^ round.wrapping_mul(MIX_ROUND))
}

/// A xoshiro256** generator with a draw counter.
///
/// Streams are plain owned values with no interior sharing: moving one to a
/// worker hands that worker the whole stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    state: [u64; 4],
    consumed: u64,
}

/// Shorthand for [`RngStream::from_seed`].
pub fn make_stream(seed: u64) -> RngStream {
    RngStream::from_seed(seed)
}

impl RngStream {
    /// Expands `seed` into the 256-bit state with four SplitMix64 steps.
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for word in &mut state {
            sm = sm.wrapping_add(SPLITMIX_GAMMA);
            *word = splitmix_finalize(sm);
        }
        // xoshiro has a fixed point at the all-zero state.
        if state == [0; 4] {
            state[0] = 1;
        }
        RngStream { state, consumed: 0 }
    }

    pub fn derived(base_seed: u64, domain: SeedDomain, client_id: u64, round: u64) -> Self {
        Self::from_seed(derive_seed(base_seed, domain, client_id, round))
    }

    /// Number of 64-bit draws taken so far.
    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        self.consumed += 1;
        result
    }

    /// Uniform double in `[0, 1)` with 53 bits of resolution. One draw.
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate by Box–Muller. Always two draws; the second
    /// variate of the pair is discarded rather than cached.
    pub fn next_gaussian(&mut self) -> f64 {
        let mut u1 = self.next_uniform();
        let u2 = self.next_uniform();
        if u1 == 0.0 {
            u1 = f64::EPSILON / 2.0; // 2^-53, the smallest nonzero uniform
        }
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Integer in `[0, bound)` by multiply-shift reduction. One draw.
    ///
    /// No rejection step: an outcome's probability is off by at most
    /// `bound / 2^64`, which stays below `2^-32` for every bound this crate uses.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Fisher–Yates from the last index down; `len - 1` draws.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)` in selection order, by a partial
    /// forward Fisher–Yates pass. Exactly `k` draws.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(Error::invalid(format!(
                "cannot sample {k} items without replacement from {n}"
            )));
        }
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }
}

/// The streams one client owns for one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStreamSuite {
    pub client_id: u64,
    pub round: u64,
    pub shuffle: RngStream,
    pub augment: RngStream,
    pub dropout: RngStream,
}

impl RngStreamSuite {
    pub fn new(base_seed: u64, client_id: u64, round: u64) -> Self {
        let stream = |domain| RngStream::derived(base_seed, domain, client_id, round);
        RngStreamSuite {
            client_id,
            round,
            shuffle: stream(SeedDomain::ClientShuffle),
            augment: stream(SeedDomain::ClientAugment),
            dropout: stream(SeedDomain::ClientDropout),
        }
    }
}
