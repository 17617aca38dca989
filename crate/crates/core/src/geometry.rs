//! Plane and rigid-transform types.
//!
//! All geometry is carried in `f64` world millimetres. The world origin sits
//! at the centre of the volume; voxel index `i` along an axis maps to
//! `i * spacing - extent / 2`.
//!
//! A plane is the image of the canonical `x/y` plane under a rigid transform
//! whose rotation columns are the plane axes: column 0 is the row direction
//! `e_u`, column 1 the column direction `e_v`, column 2 the normal
//! `e_w = e_u x e_v`, and the translation is the plane centre.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Tolerance for orthonormality checks on rotations and plane frames.
pub const ORTHO_TOL: f64 = 1e-9;

/// Max-abs deviation of `m` from a proper rotation (`m^T m = I`, `det m = 1`).
pub fn rotation_deviation(m: &Mat3) -> f64 {
    let gram = m.transpose() * m - Mat3::identity();
    let ortho = gram.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    ortho.max((m.determinant() - 1.0).abs())
}

pub fn is_rotation(m: &Mat3) -> bool {
    m.iter().all(|v| v.is_finite()) && rotation_deviation(m) < ORTHO_TOL
}

/// Rotation of `angle` radians about `axis` (need not be unit length).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let axis = nalgebra::Unit::new_normalize(axis);
    *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix()
}

/// Angle between two non-zero vectors in degrees, in `[0, 180]`.
///
/// Uses `atan2(|a x b|, a . b)`, which stays accurate near 0 and 180 degrees
/// where `acos` of the normalized dot product loses precision.
pub fn angle_between(a: &Vec3, b: &Vec3) -> Result<f64> {
    if !(a.iter().chain(b.iter()).all(|v| v.is_finite())) {
        return Err(Error::NonFinite("angle_between"));
    }
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return Err(Error::ZeroVector("angle_between"));
    }
    Ok(a.cross(b).norm().atan2(a.dot(b)).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BodyRegion {
    Calcaneus,
    Ankle,
    Knee,
    Wrist,
}

impl BodyRegion {
    pub const ALL: [BodyRegion; 4] = [
        BodyRegion::Calcaneus,
        BodyRegion::Ankle,
        BodyRegion::Knee,
        BodyRegion::Wrist,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or(Error::UnknownRegion(i))
    }

    pub fn name(self) -> &'static str {
        match self {
            BodyRegion::Calcaneus => "calcaneus",
            BodyRegion::Ankle => "ankle",
            BodyRegion::Knee => "knee",
            BodyRegion::Wrist => "wrist",
        }
    }

    /// Whether the third ("coronal") slot of this region holds an oblique plane.
    pub fn has_oblique_coronal(self) -> bool {
        self == BodyRegion::Calcaneus
    }
}

impl fmt::Display for BodyRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BodyRegion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::UnknownName { what: "body region", value: s.to_string() })
    }
}

/// Proper rotation plus translation in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigid transform translation"));
        }
        if !is_rotation(&rotation) {
            return Err(Error::InvalidRotation { deviation: rotation_deviation(&rotation) });
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn to_homogeneous(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// One MPR plane: centre in world mm plus an orthonormal right-handed frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    center: Vec3,
    e_u: Vec3,
    e_v: Vec3,
    e_w: Vec3,
}

impl Plane {
    /// Builds a plane; `e_w` is always `e_u x e_v`.
    pub fn new(center: Vec3, e_u: Vec3, e_v: Vec3) -> Result<Self> {
        if !center.iter().chain(e_u.iter()).chain(e_v.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("plane"));
        }
        let deviation = (e_u.norm() - 1.0)
            .abs()
            .max((e_v.norm() - 1.0).abs())
            .max(e_u.dot(&e_v).abs());
        if deviation > ORTHO_TOL {
            return Err(Error::InvalidPlane { deviation });
        }
        Ok(Self { center, e_u, e_v, e_w: e_u.cross(&e_v) })
    }

    /// Canonical axial plane through the origin.
    pub fn canonical() -> Self {
        Self { center: Vec3::zeros(), e_u: Vec3::x(), e_v: Vec3::y(), e_w: Vec3::z() }
    }

    pub fn center(&self) -> &Vec3 {
        &self.center
    }
    pub fn e_u(&self) -> &Vec3 {
        &self.e_u
    }
    pub fn e_v(&self) -> &Vec3 {
        &self.e_v
    }
    pub fn e_w(&self) -> &Vec3 {
        &self.e_w
    }

    /// Rotation whose columns are `e_u, e_v, e_w`.
    pub fn frame(&self) -> Mat3 {
        Mat3::from_columns(&[self.e_u, self.e_v, self.e_w])
    }

    pub fn with_center(&self, center: Vec3) -> Self {
        Self { center, ..*self }
    }
}

pub fn plane_from_transform(t: &RigidTransform) -> Plane {
    let r = t.rotation();
    let e_u: Vec3 = r.column(0).into();
    let e_v: Vec3 = r.column(1).into();
    Plane { center: *t.translation(), e_u, e_v, e_w: e_u.cross(&e_v) }
}

pub fn transform_from_plane(p: &Plane) -> RigidTransform {
    RigidTransform { rotation: p.frame(), translation: p.center }
}

/// Orthonormalizes a pair of directions: `u` keeps its direction, `v` loses
/// its component along `u`.
pub fn orthonormal_pair(u: &Vec3, v: &Vec3) -> Result<(Vec3, Vec3)> {
    let un = u.norm();
    if un == 0.0 || !un.is_finite() {
        return Err(Error::ZeroVector("orthonormal_pair"));
    }
    let u = u / un;
    let v = v - u * u.dot(v);
    let vn = v.norm();
    if vn < 1e-12 {
        return Err(Error::ZeroVector("orthonormal_pair"));
    }
    Ok((u, v / vn))
}

/// The three standard planes of one volume. For the calcaneus the coronal
/// slot holds the semi-coronal plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneTriplet {
    pub axial: Plane,
    pub coronal: Plane,
    pub sagittal: Plane,
    pub region: BodyRegion,
}

impl PlaneTriplet {
    pub const NAMES: [&'static str; 3] = ["axial", "coronal", "sagittal"];

    pub fn planes(&self) -> [&Plane; 3] {
        [&self.axial, &self.coronal, &self.sagittal]
    }

    pub fn from_planes(planes: [Plane; 3], region: BodyRegion) -> Self {
        let [axial, coronal, sagittal] = planes;
        Self { axial, coronal, sagittal, region }
    }

    pub fn map_planes(&self, mut f: impl FnMut(&Plane) -> Result<Plane>) -> Result<Self> {
        Ok(Self {
            axial: f(&self.axial)?,
            coronal: f(&self.coronal)?,
            sagittal: f(&self.sagittal)?,
            region: self.region,
        })
    }
}

/// Grid geometry of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl VolumeMeta {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Config(format!("volume dims must be >= 2 per axis, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("volume spacing must be > 0, got {spacing:?}")));
        }
        Ok(Self { dims, spacing })
    }

    pub fn cubic(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n; 3], [spacing; 3])
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        )
    }

    pub fn half_extent(&self) -> Vec3 {
        self.extent() * 0.5
    }

    pub fn voxel_to_world(&self, idx: [f64; 3]) -> Vec3 {
        let h = self.half_extent();
        Vec3::new(
            idx[0] * self.spacing[0] - h.x,
            idx[1] * self.spacing[1] - h.y,
            idx[2] * self.spacing[2] - h.z,
        )
    }

    pub fn world_to_voxel(&self, p: &Vec3) -> [f64; 3] {
        let h = self.half_extent();
        [
            (p.x + h.x) / self.spacing[0],
            (p.y + h.y) / self.spacing[1],
            (p.z + h.z) / self.spacing[2],
        ]
    }
}

/// Maps a world position to `[-1, 1]^3`, with 0 at the volume centre and the
/// half extent at ±1.
pub fn normalize_translation(t: &Vec3, meta: &VolumeMeta) -> Result<Vec3> {
    if !t.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("translation"));
    }
    let h = meta.half_extent();
    for axis in 0..3 {
        if t[axis].abs() > h[axis] * (1.0 + 1e-12) {
            return Err(Error::OutOfExtent { axis, value: t[axis], half_extent: h[axis] });
        }
    }
    Ok(t.component_div(&h))
}

/// Inverse of [`normalize_translation`]; accepts values outside `[-1, 1]`
/// since raw network outputs are not bounded.
pub fn denormalize_translation(n: &Vec3, meta: &VolumeMeta) -> Vec3 {
    n.component_mul(&meta.half_extent())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rot_z(deg: f64) -> Mat3 {
        axis_angle(Vec3::z(), deg.to_radians())
    }

    fn random_rotation(rng: &mut impl Rng) -> Mat3 {
        // uniform unit quaternion via normalized gaussian-ish 4-vector
        loop {
            let q = nalgebra::Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = q.norm();
            if n > 0.1 && n <= 1.0 {
                let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
                return *q.to_rotation_matrix().matrix();
            }
        }
    }

    #[test]
    fn identity_transform_gives_canonical_plane() {
        let p = plane_from_transform(&RigidTransform::identity());
        assert_eq!(p, Plane::canonical());
        assert_eq!(transform_from_plane(&Plane::canonical()), RigidTransform::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let t = RigidTransform::new(rot_z(90.0), Vec3::zeros()).unwrap();
        let p = plane_from_transform(&t);
        assert_abs_diff_eq!(*p.e_u(), Vec3::y(), epsilon = 1e-15);
        assert_abs_diff_eq!(*p.e_v(), -Vec3::x(), epsilon = 1e-15);

        let p = Plane::new(Vec3::zeros(), Vec3::y(), -Vec3::x()).unwrap();
        let t = transform_from_plane(&p);
        assert_abs_diff_eq!(*t.rotation(), rot_z(90.0), epsilon = 1e-15);
    }

    #[test]
    fn transform_plane_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let t = Vec3::new(rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0), rng.gen_range(-80.0..80.0));
            let tf = RigidTransform::new(r, t).unwrap();
            let back = transform_from_plane(&plane_from_transform(&tf));
            let dev = (back.rotation() - tf.rotation()).amax().max((back.translation() - tf.translation()).amax());
            assert!(dev < 1e-12, "deviation {dev}");
        }
    }

    #[test]
    fn plane_rejects_non_orthonormal() {
        assert!(matches!(
            Plane::new(Vec3::zeros(), Vec3::x(), Vec3::new(1e-6, 1.0, 0.0)),
            Err(Error::InvalidPlane { .. })
        ));
        assert!(Plane::new(Vec3::zeros(), Vec3::x() * 1.001, Vec3::y()).is_err());
        assert!(Plane::new(Vec3::zeros(), Vec3::x(), Vec3::new(1e-11, 1.0, 0.0)).is_ok());
    }

    #[test]
    fn rigid_transform_rejects_reflection() {
        let mut m = Mat3::identity();
        m[(0, 0)] = -1.0;
        assert!(RigidTransform::new(m, Vec3::zeros()).is_err());
    }

    #[test]
    fn translation_normalization() {
        let meta = VolumeMeta::cubic(32, 5.0).unwrap();
        assert_eq!(normalize_translation(&Vec3::zeros(), &meta).unwrap(), Vec3::zeros());
        assert_eq!(normalize_translation(&Vec3::new(80.0, 0.0, 0.0), &meta).unwrap(), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(
            normalize_translation(&Vec3::new(-40.0, 40.0, 0.0), &meta).unwrap(),
            Vec3::new(-0.5, 0.5, 0.0)
        );
        assert!(matches!(
            normalize_translation(&Vec3::new(0.0, 81.0, 0.0), &meta),
            Err(Error::OutOfExtent { axis: 1, .. })
        ));
        let n = Vec3::new(0.3, -0.7, 0.9);
        assert_abs_diff_eq!(
            normalize_translation(&denormalize_translation(&n, &meta), &meta).unwrap(),
            n,
            epsilon = 1e-15
        );
    }

    #[test]
    fn angle_between_cases() {
        assert_eq!(angle_between(&Vec3::x(), &Vec3::x()).unwrap(), 0.0);
        assert_abs_diff_eq!(angle_between(&Vec3::x(), &Vec3::y()).unwrap(), 90.0, epsilon = 1e-12);
        assert_abs_diff_eq!(angle_between(&Vec3::x(), &-Vec3::x()).unwrap(), 180.0, epsilon = 1e-12);
        // exact: atan(1e-8) in degrees = 5.729577951308232e-7 (series to O(1e-24))
        let exact = 1e-8f64.to_degrees();
        let got = angle_between(&Vec3::x(), &Vec3::new(1.0, 1e-8, 0.0)).unwrap();
        assert!(((got - exact) / exact).abs() < 1e-3, "{got} vs {exact}");
        assert!(matches!(angle_between(&Vec3::zeros(), &Vec3::x()), Err(Error::ZeroVector(_))));
    }

    #[test]
    fn angle_between_symmetric_and_triangle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = || Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        for _ in 0..2000 {
            let (a, b, c) = (v(), v(), v());
            let ab = angle_between(&a, &b).unwrap();
            assert_eq!(ab, angle_between(&b, &a).unwrap());
            let ac = angle_between(&a, &c).unwrap();
            let cb = angle_between(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-9);
            assert!((0.0..=180.0).contains(&ab));
        }
    }

    #[test]
    fn voxel_world_mapping() {
        let meta = VolumeMeta::cubic(32, 5.0).unwrap();
        assert_eq!(meta.voxel_to_world([0.0; 3]), Vec3::from_element(-80.0));
        assert_eq!(meta.voxel_to_world([16.0; 3]), Vec3::zeros());
        let p = Vec3::new(12.5, -3.0, 70.0);
        let idx = meta.world_to_voxel(&p);
        assert_abs_diff_eq!(meta.voxel_to_world(idx), p, epsilon = 1e-12);
        assert!(VolumeMeta::new([1, 4, 4], [1.0; 3]).is_err());
        assert!(VolumeMeta::new([4, 4, 4], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn region_names_round_trip() {
        for r in BodyRegion::ALL {
            assert_eq!(r.name().parse::<BodyRegion>().unwrap(), r);
            assert_eq!(BodyRegion::from_index(r.index()).unwrap(), r);
        }
        assert!(BodyRegion::from_index(4).is_err());
        assert!("hip".parse::<BodyRegion>().is_err());
    }
}
