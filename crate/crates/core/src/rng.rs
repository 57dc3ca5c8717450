//! Seeded random streams. Every stochastic operation takes an explicit rng
//! so whole runs are reproducible from a single seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type FlowRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> FlowRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named sub-task of a seeded run.
pub fn substream(seed: u64, stream: u64) -> FlowRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A child seed, for components configured by seed rather than by rng.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    substream(seed, stream).random()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}
