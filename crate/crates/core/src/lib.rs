//! Standard-plane (MPR) parameter regression for 3D volumes.
//!
//! The crate covers the whole pipeline:
//!
//! * [`geometry`]: planes, rigid transforms and translation normalization.
//! * [`rotation`]: the four rotation encodings a network can regress
//!   (Euler sin/cos, quaternion, 6D with x/y or x/z columns) and their decoders.
//! * [`augmentation`]: composite spatial augmentation with a single trilinear
//!   resampling pass, HU clipping/rescaling and sigmoid windowing.
//! * [`phantom`]: synthetic volumes with exact ground-truth planes, dataset
//!   manifests and patient-grouped folds.
//! * [`model`]: a small PoseNet-shaped 3D CNN with hand-written backward
//!   passes in baseline, class-conditioned and multi-head variants.
//! * [`training`]: momentum SGD with step decay and class-balanced oversampling.
//! * [`evaluation`]: plane coupling post-processing, the weighted plane score
//!   and fold aggregation.
//! * [`study`]: the experiment drivers used by the `mpr` command-line tool.

pub mod augmentation;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod phantom;
pub mod rng;
pub mod rotation;
pub mod study;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{BodyRegion, Mat3, Mat4, Plane, PlaneTriplet, RigidTransform, Vec3, VolumeMeta};
pub use model::{ModelConfig, ModelState, Variant};
pub use rotation::{RepresentationKind, RotationEncoding};
pub use volume::Volume;
