//! Deterministic random-number streams for Monte Carlo replication.
//!
//! Every sampler in this crate derives its noise from a `(seed, stream)` pair:
//! the seed identifies the experiment and the stream index identifies the
//! replicate. Streams are independent and can be consumed from any thread in
//! any order, so parallel runs produce output identical to serial ones.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// ChaCha stream for replicate `index` of the experiment identified by `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws a standard-normal vector of length `n`.
pub fn standard_normal_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}
