//! Seeded random streams.
//!
//! Every draw in the crate comes from a ChaCha8 generator seeded with a
//! 64-bit value and a stream id, so noise, sampling and initialization draws
//! made from the same seed never overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ObservationNoise = 1,
    Sampling = 2,
    Modification = 3,
    Initialization = 4,
    Check = 5,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Standard normal variate by Marsaglia's polar method (one of the pair is
/// discarded so the generator stays stateless).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let v: f64 = rng.random::<f64>() * 2.0 - 1.0;
        let s = u * u + v * v;
        if s > 0.0 && s < 1.0 {
            return u * (-2.0 * s.ln() / s).sqrt();
        }
    }
}
