//! Deterministic random-stream schedule.
//!
//! Every stochastic stage draws from its own ChaCha stream whose seed is a
//! hash of the master seed and a tag path such as `(replicate b, stage)`.
//! Streams never depend on scheduling, so results are identical for any
//! thread count, and adding replicates leaves earlier ones untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stage tags used in the seed schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stage {
    ForecastPath = 1,
    HistorySimulation = 2,
    HazardDraw = 3,
    CountDraw = 4,
    Retry = 5,
    Scenario = 6,
    Replicate = 7,
    CoverageRep = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSchedule {
    master: u64,
}

impl SeedSchedule {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Seed for the stream identified by `path`.
    pub fn derive(&self, path: &[u64]) -> u64 {
        path.iter()
            .fold(splitmix64(self.master), |h, &tag| splitmix64(h ^ splitmix64(tag)))
    }

    /// Child schedule rooted at `path`; `child(p).derive(q)` is a distinct
    /// stream from `derive(p ++ q)` only in name, both are deterministic.
    pub fn child(&self, path: &[u64]) -> SeedSchedule {
        SeedSchedule::new(self.derive(path))
    }

    pub fn stream(&self, path: &[u64]) -> StreamRng {
        StreamRng::seed_from_u64(self.derive(path))
    }

    pub fn stage(&self, stage: Stage, index: u64) -> StreamRng {
        self.stream(&[stage as u64, index])
    }
}
