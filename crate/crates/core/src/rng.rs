//! Seed discipline: one master seed, independent named streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Rollout = 3,
    MonteCarlo = 4,
    Eval = 5,
    Dynamics = 6,
}

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(master: u64, stream: Stream) -> StreamRng {
    indexed_stream_rng(master, stream, 0)
}

/// A sub-stream, e.g. one per rollout worker or per grid row.
pub fn indexed_stream_rng(master: u64, stream: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((stream as u64) << 40) | index);
    rng
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn uniform_in(rng: &mut impl Rng, bounds: &[(f64, f64)]) -> Vec<f64> {
    bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect()
}
