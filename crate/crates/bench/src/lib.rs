//! Shared fixtures for the benchmarks.

use mpr_core::geometry::RigidTransform;
use mpr_core::model::{ModelConfig, ModelState};
use mpr_core::phantom::{generate_phantom, PhantomSpec};
use mpr_core::rng::{rng_for, uniform_rotation};
use mpr_core::{BodyRegion, Mat3, PlaneTriplet, Vec3, Volume};
use rand::Rng;

/// Deterministic values in `[-1, 1)`.
pub fn signal(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = rng_for(seed, &[]);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// A 32³ knee phantom under a fixed pose.
pub fn phantom() -> (Volume, PlaneTriplet) {
    let pose = RigidTransform::new(uniform_rotation(&mut rng_for(3, &[])), Vec3::new(4.0, -2.0, 1.0)).expect("rotation is proper");
    generate_phantom(&PhantomSpec::new(BodyRegion::Knee, PhantomSpec::desk_meta(), pose, 17))
}

pub fn rotations(n: usize, seed: u64) -> Vec<Mat3> {
    let mut rng = rng_for(seed, &[]);
    (0..n).map(|_| uniform_rotation(&mut rng)).collect()
}

/// Default desk-scale model.
pub fn model() -> ModelState<f32> {
    ModelState::init(&ModelConfig::default(), 1).expect("default config is valid")
}
