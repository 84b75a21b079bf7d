//! Seeded, counter-based random streams.
//!
//! Every random draw comes from ChaCha8 keyed by `seed_from_u64(run_seed)`
//! with the 64-bit ChaCha stream id set to `(domain << 56) | index`. Because
//! each trajectory, prompt batch and timing jitter owns its own stream, the
//! values drawn do not depend on the order in which the sampler and learner
//! happen to interleave.
//!
//! Uniform doubles take the top 53 bits of `next_u64` scaled by 2^-53.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    Trajectory = 1,
    PromptSchedule = 2,
    Jitter = 3,
    Init = 4,
    TaskBuild = 5,
    Schedule = 6,
    Test = 7,
}

#[derive(Debug, Clone)]
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn new(seed: u64, domain: Domain, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((domain as u64) << 56) | (index & ((1 << 56) - 1)));
        Stream(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`, rejection-sampled so it is exactly unbiased.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.0.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
