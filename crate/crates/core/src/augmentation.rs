//! Online augmentation and intensity normalization.
//!
//! Spatial operations are homogeneous 4x4 matrices acting on world mm
//! coordinates and are folded into one composite
//!
//! ```text
//! T_m = M * T_r * T_s * T_t * T_R
//! ```
//!
//! (subsampling, scaling, translation, rotation, with the optional x-mirror
//! `M` applied last) so every augmented volume is interpolated exactly once.
//!
//! Intensities go through `c(x)` (shift by 1000 HU, random gain `f`, clip to
//! the HU window and rescale to `[0, 1]`) followed by the sigmoid window
//! `w(x) = 1 / (1 + exp(g (0.5 - x)))` with `g = ln((1 - y) / y) / 0.4`.

use rand::Rng;

use crate::config::{AugmentConfig, IntensityConfig};
use crate::error::{Error, Result};
use crate::geometry::{orthonormal_pair, Mat3, Mat4, Plane, PlaneTriplet, Vec3, VolumeMeta};
use crate::rng::rng_for;
use crate::rotation::euler_zyx_to_matrix;
use crate::volume::{Volume, AIR_HU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SpatialFlags {
    pub rotation: bool,
    pub scale: bool,
    pub translation: bool,
    pub subsample: bool,
}

impl SpatialFlags {
    pub const NONE: SpatialFlags = SpatialFlags { rotation: false, scale: false, translation: false, subsample: false };

    /// All 16 on/off combinations, bit 0 = rotation ... bit 3 = subsample.
    pub fn all_combinations() -> impl Iterator<Item = SpatialFlags> {
        (0u8..16).map(|b| SpatialFlags {
            rotation: b & 1 != 0,
            scale: b & 2 != 0,
            translation: b & 4 != 0,
            subsample: b & 8 != 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialAugmentParams {
    /// Intrinsic Z-Y-X Euler angles in degrees that generated `rotation`.
    pub euler_deg: [f64; 3],
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: Vec3,
    pub mirror_x: bool,
    pub subsample: f64,
    pub apply: SpatialFlags,
}

impl SpatialAugmentParams {
    pub fn identity() -> Self {
        Self {
            euler_deg: [0.0; 3],
            rotation: Mat3::identity(),
            scale: 1.0,
            translation: Vec3::zeros(),
            mirror_x: false,
            subsample: 1.0,
            apply: SpatialFlags::NONE,
        }
    }

    /// Enables subsampling by the output/input size ratio along x.
    pub fn with_subsampling(mut self, in_dims: [usize; 3], out_dims: [usize; 3]) -> Self {
        self.subsample = out_dims[0] as f64 / in_dims[0] as f64;
        self.apply.subsample = self.subsample != 1.0;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityParams {
    pub f: f64,
    pub min_hu: f64,
    pub max_hu: f64,
    pub y: f64,
    pub gain: f64,
}

impl IntensityParams {
    pub fn new(f: f64, cfg: &IntensityConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { f, min_hu: cfg.min_hu, max_hu: cfg.max_hu, y: cfg.y, gain: gain_from_y(cfg.y)? })
    }

    /// Inference-time parameters: no random gain.
    pub fn nominal(cfg: &IntensityConfig) -> Result<Self> {
        Self::new(1.0, cfg)
    }
}

/// Window gain such that `w(0.5 -/+ 0.4) = y, 1 - y`.
pub fn gain_from_y(y: f64) -> Result<f64> {
    if !(y > 0.0 && y < 0.5) {
        return Err(Error::Config(format!("window level y must lie in (0, 0.5), got {y}")));
    }
    Ok(((1.0 - y) / y).ln() / 0.4)
}

/// Draws one set of augmentation parameters. Each spatial operation and the
/// mirror are enabled independently; values are uniform in their ranges.
pub fn sample_params(
    seed: u64,
    aug: &AugmentConfig,
    intensity: &IntensityConfig,
) -> Result<(SpatialAugmentParams, IntensityParams)> {
    aug.validate()?;
    let mut rng = rng_for(seed, &[0xA06]);
    let mut uniform = |lo: f64, hi: f64| if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    // draw every value regardless of flags so the stream layout is fixed
    let euler_deg = [
        uniform(-aug.rot_deg, aug.rot_deg),
        uniform(-aug.rot_deg, aug.rot_deg),
        uniform(-aug.rot_deg, aug.rot_deg),
    ];
    let scale = uniform(aug.scale[0], aug.scale[1]);
    let translation = Vec3::new(
        uniform(-aug.trans_mm, aug.trans_mm),
        uniform(-aug.trans_mm, aug.trans_mm),
        uniform(-aug.trans_mm, aug.trans_mm),
    );
    let f = uniform(intensity.f[0], intensity.f[1]);
    let mut coin = |p: f64| rng.gen_bool(p);
    let apply = SpatialFlags {
        rotation: coin(aug.p),
        scale: coin(aug.p),
        translation: coin(aug.p),
        subsample: false,
    };
    let mirror_x = coin(aug.mirror_p);
    let rotation =
        euler_zyx_to_matrix(euler_deg[0].to_radians(), euler_deg[1].to_radians(), euler_deg[2].to_radians());
    let spatial = SpatialAugmentParams { euler_deg, rotation, scale, translation, mirror_x, subsample: 1.0, apply };
    Ok((spatial, IntensityParams::new(f, intensity)?))
}

pub fn subsample_matrix(d: f64) -> Mat4 {
    Mat4::new_scaling(d).map_with_location(|r, c, v| if r == 3 && c == 3 { 1.0 } else { v })
}

pub fn scale_matrix(s: f64) -> Mat4 {
    subsample_matrix(s)
}

pub fn translation_matrix(t: &Vec3) -> Mat4 {
    Mat4::new_translation(t)
}

pub fn rotation_matrix(r: &Mat3) -> Mat4 {
    r.to_homogeneous()
}

pub fn mirror_x_matrix() -> Mat4 {
    Mat4::from_diagonal(&nalgebra::Vector4::new(-1.0, 1.0, 1.0, 1.0))
}

/// `M * T_r * T_s * T_t * T_R`; disabled operations contribute the identity.
pub fn compose_transform(p: &SpatialAugmentParams) -> Mat4 {
    let mut m = Mat4::identity();
    if p.apply.subsample {
        m *= subsample_matrix(p.subsample);
    }
    if p.apply.scale {
        m *= scale_matrix(p.scale);
    }
    if p.apply.translation {
        m *= translation_matrix(&p.translation);
    }
    if p.apply.rotation {
        m *= rotation_matrix(&p.rotation);
    }
    if p.mirror_x {
        m = mirror_x_matrix() * m;
    }
    m
}

fn voxel_to_world_matrix(meta: &VolumeMeta) -> Mat4 {
    let h = meta.half_extent();
    let mut m = Mat4::identity();
    for a in 0..3 {
        m[(a, a)] = meta.spacing[a];
        m[(a, 3)] = -h[a];
    }
    m
}

fn snap_integers(m: &mut Mat4) {
    for v in m.iter_mut() {
        let r = v.round();
        if (*v - r).abs() < 1e-12 {
            *v = r;
        }
    }
}

/// Resamples `v` under the forward world transform `t` into a grid of
/// `out_dims` voxels with the input spacing, in a single trilinear pass.
/// Samples falling outside the input read as air (-1000 HU).
pub fn resample(v: &Volume, t: &Mat4, out_dims: [usize; 3]) -> Result<Volume> {
    let lin = t.fixed_view::<3, 3>(0, 0).into_owned();
    let det = lin.determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::SingularTransform(det));
    }
    let inv = t.try_inverse().ok_or(Error::SingularTransform(det))?;
    let out_meta = VolumeMeta::new(out_dims, v.meta().spacing)?;
    let w_in_inv = voxel_to_world_matrix(v.meta()).try_inverse().expect("positive spacing");
    let mut idx_map = w_in_inv * inv * voxel_to_world_matrix(&out_meta);
    snap_integers(&mut idx_map);
    let [nx, ny, nz] = out_dims;
    let mut voxels = Vec::with_capacity(out_meta.voxel_count());
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = idx_map * nalgebra::Vector4::new(i as f64, j as f64, k as f64, 1.0);
                let s = v.sample_voxel([p.x, p.y, p.z]).map(|s| s as f32).unwrap_or(AIR_HU);
                voxels.push(s);
            }
        }
    }
    Volume::new(out_meta, voxels)
}

/// Splits the linear block of `t` into `scale * Q` with `Q` orthogonal.
/// Returns `(scale, mirrored)`.
fn similarity_parts(t: &Mat4) -> Result<(f64, bool)> {
    let bottom = t.fixed_view::<1, 4>(3, 0);
    if bottom[(0, 0)] != 0.0 || bottom[(0, 1)] != 0.0 || bottom[(0, 2)] != 0.0 || bottom[(0, 3)] != 1.0 {
        return Err(Error::NonConformingTransform("projective bottom row".into()));
    }
    let lin = t.fixed_view::<3, 3>(0, 0).into_owned();
    let det = lin.determinant();
    if !det.is_finite() || det.abs() < 1e-12 {
        return Err(Error::SingularTransform(det));
    }
    let scale = det.abs().cbrt();
    let gram = lin.transpose() * lin / (scale * scale) - Mat3::identity();
    if gram.amax() > 1e-9 {
        return Err(Error::NonConformingTransform(format!("linear part is not a similarity (deviation {:.3e})", gram.amax())));
    }
    Ok((scale, det < 0.0))
}

fn map_plane(plane: &Plane, t: &Mat4, lin: &Mat3, scale: f64, mirrored: bool) -> Result<Plane> {
    let c = plane.center();
    let center = (t * c.push(1.0)).xyz();
    let u = lin * plane.e_u() / scale;
    let mut v = lin * plane.e_v() / scale;
    if mirrored {
        v = -v;
    }
    let deviation = (u.norm() - 1.0).abs().max((v.norm() - 1.0).abs()).max(u.dot(&v).abs());
    let (u, v) = if deviation > 4.0 * f64::EPSILON { orthonormal_pair(&u, &v)? } else { (u, v) };
    Plane::new(center, u, v)
}

/// Maps ground-truth planes through an augmentation transform. Centres follow
/// `t`; directions follow its rotation/mirror part. After a mirror `e_v` is
/// negated so every frame stays right-handed.
pub fn transform_annotation(planes: &PlaneTriplet, t: &Mat4) -> Result<PlaneTriplet> {
    let (scale, mirrored) = similarity_parts(t)?;
    let lin = t.fixed_view::<3, 3>(0, 0).into_owned();
    planes.map_planes(|p| map_plane(p, t, &lin, scale, mirrored))
}

/// `c(x)`: shift by 1000 HU, apply gain `f`, clip to `[min_hu, max_hu]` (in the
/// shifted frame) and rescale to `[0, 1]`.
pub fn clip_rescale(x_hu: f64, ip: &IntensityParams) -> f64 {
    let lo = ip.min_hu + 1000.0;
    let span = ip.max_hu - ip.min_hu;
    ((ip.f * (x_hu + 1000.0) - lo) / span).clamp(0.0, 1.0)
}

pub fn window(x: f64, gain: f64) -> f64 {
    1.0 / (1.0 + (gain * (0.5 - x)).exp())
}

pub fn normalize_intensity(x_hu: f64, ip: &IntensityParams) -> f64 {
    window(clip_rescale(x_hu, ip), ip.gain)
}

/// Full intensity normalization of a volume into network input.
pub fn normalize_volume(v: &Volume, ip: &IntensityParams) -> Vec<f32> {
    v.voxels().iter().map(|&x| normalize_intensity(x as f64, ip) as f32).collect()
}

/// One augmented training sample.
pub struct Augmented {
    pub input: Vec<f32>,
    pub planes: PlaneTriplet,
    pub transform: Mat4,
}

/// Samples parameters from `seed`, resamples the volume once and maps the
/// annotation with the same composite transform.
pub fn augment_sample(
    volume: &Volume,
    planes: &PlaneTriplet,
    seed: u64,
    aug: &AugmentConfig,
    intensity: &IntensityConfig,
) -> Result<Augmented> {
    let (spatial, ip) = sample_params(seed, aug, intensity)?;
    let t = compose_transform(&spatial);
    let moved = resample(volume, &t, volume.meta().dims)?;
    Ok(Augmented { input: normalize_volume(&moved, &ip), planes: transform_annotation(planes, &t)?, transform: t })
}
