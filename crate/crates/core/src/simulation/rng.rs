//! Seeded random streams.
//!
//! Every generator draws from ChaCha8 seeded with the experiment seed and a
//! per-subsystem stream id, so adding draws to one subsystem never shifts the
//! numbers another subsystem sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Trajectory = 1,
    ImuNoise = 2,
    Scene = 3,
    FeatureNoise = 4,
    Misalignment = 5,
    Correspondences = 6,
    Graph = 7,
    Sensor = 8,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Sub-stream for repetition `index` of a subsystem.
pub fn substream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}

pub fn normal3<R: rand::Rng + ?Sized>(rng: &mut R, sigma: f64) -> Vec3 {
    let mut d = || -> f64 { StandardNormal.sample(rng) };
    Vec3::new(d(), d(), d()) * sigma
}

pub fn unit3<R: rand::Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = normal3(rng, 1.0);
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
