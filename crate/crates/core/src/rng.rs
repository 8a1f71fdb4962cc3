//! Seeded random streams.
//!
//! Every stochastic routine draws from a ChaCha8 stream identified by a
//! `(seed, stream)` pair. ChaCha is counter based, so distinct stream ids
//! give independent sequences without any shared state; chains use their
//! chain id as the stream and training uses the epoch index.
//!
//! Draw order inside one HMC trajectory is fixed: first the momenta, one
//! standard normal per link in storage order `[mu][x][y]`, then exactly one
//! uniform for the accept/reject test.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Base of the streams that draw random starting configurations; chain `k`
/// uses `START_STREAM + k`, clear of the chain streams themselves.
pub const START_STREAM: u64 = 1 << 48;

/// Random stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform angle in `(-pi, pi]`.
#[inline]
pub fn uniform_angle<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    std::f64::consts::PI - std::f64::consts::TAU * u
}
