//! Seed derivation and shared sampling helpers.
//!
//! Every random stream in the pipeline is a `ChaCha8Rng` seeded from the run
//! seed plus a path of stream ids (epoch, sample index, ...), so results do
//! not depend on how work is spread over threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Mat3;

pub type SeededRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, path: &[u64]) -> SeededRng {
    SeededRng::seed_from_u64(derive_seed(base, path))
}

/// Haar-uniform random rotation (Shoemake's subgroup algorithm).
pub fn uniform_rotation(rng: &mut impl Rng) -> Mat3 {
    use std::f64::consts::TAU;
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (x, y) = (a * (TAU * u2).sin(), a * (TAU * u2).cos());
    let (z, w) = (b * (TAU * u3).sin(), b * (TAU * u3).cos());
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
    *q.to_rotation_matrix().matrix()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_per_path() {
        let a = derive_seed(1, &[0, 1]);
        assert_eq!(a, derive_seed(1, &[0, 1]));
        assert_ne!(a, derive_seed(1, &[1, 0]));
        assert_ne!(a, derive_seed(2, &[0, 1]));
        assert_ne!(derive_seed(1, &[]), derive_seed(1, &[0]));
    }

    #[test]
    fn uniform_rotation_is_proper() {
        let mut rng = rng_for(5, &[]);
        for _ in 0..100 {
            assert!(crate::geometry::is_rotation(&uniform_rotation(&mut rng)));
        }
    }
}
