//! Deterministic random streams.

pub use rand::{Rng, RngCore, SeedableRng};
pub use rand_chacha::ChaCha8Rng as StdRng;

/// Seeds a stream from a root seed and a label, so independent consumers
/// (corpus, init, rollouts, eval) never share draws.
pub fn stream(seed: u64, label: u64) -> StdRng {
    let mut rng = StdRng::seed_from_u64(seed);
    rng.set_stream(label);
    rng
}

/// Uniform draw in `[0, 1)`.
#[inline]
pub fn uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
