//! Rotation encodings for network regression.
//!
//! Every encoding keeps its values in `[-1, 1]` after encoding. Decoding
//! accepts arbitrary raw network outputs and always produces an exactly
//! orthonormal matrix (or a dedicated error for degenerate input).
//!
//! Conventions (changing either is a breaking format change):
//! * Euler angles are intrinsic Z-Y-X: `R = Rz(alpha) * Ry(beta) * Rx(gamma)`.
//! * Quaternions are stored `(w, x, y, z)` with `w >= 0` after encoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{is_rotation, rotation_deviation, Mat3, Vec3};

/// `cos(beta)` below this is treated as gimbal lock by the Euler encoder.
const GIMBAL_EPS: f64 = 1e-12;

/// Raw 6D columns whose normalized cross product is shorter than this are
/// rejected as parallel.
const SIXD_PARALLEL_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RepresentationKind {
    #[serde(rename = "euler")]
    EulerSinCos,
    #[serde(rename = "quat")]
    Quaternion,
    #[serde(rename = "6dxy")]
    SixDxy,
    #[serde(rename = "6dxz")]
    SixDxz,
}

impl RepresentationKind {
    pub const ALL: [RepresentationKind; 4] = [
        RepresentationKind::EulerSinCos,
        RepresentationKind::Quaternion,
        RepresentationKind::SixDxy,
        RepresentationKind::SixDxz,
    ];

    /// Number of raw values the network regresses for one rotation.
    pub fn size(self) -> usize {
        match self {
            RepresentationKind::Quaternion => 4,
            _ => 6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RepresentationKind::EulerSinCos => "euler",
            RepresentationKind::Quaternion => "quat",
            RepresentationKind::SixDxy => "6dxy",
            RepresentationKind::SixDxz => "6dxz",
        }
    }

    /// Row label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            RepresentationKind::EulerSinCos => "Euler",
            RepresentationKind::Quaternion => "Quat.",
            RepresentationKind::SixDxy => "6D_xy",
            RepresentationKind::SixDxz => "6D_xz",
        }
    }
}

impl fmt::Display for RepresentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RepresentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownName { what: "representation", value: s.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationEncoding {
    /// `(sin a, cos a, sin b, cos b, sin g, cos g)`
    EulerSinCos([f64; 6]),
    /// `(w, x, y, z)`
    Quaternion([f64; 4]),
    /// first and second matrix columns, unnormalized
    SixDxy([f64; 6]),
    /// first and third matrix columns, unnormalized
    SixDxz([f64; 6]),
}

impl RotationEncoding {
    pub fn kind(&self) -> RepresentationKind {
        match self {
            RotationEncoding::EulerSinCos(_) => RepresentationKind::EulerSinCos,
            RotationEncoding::Quaternion(_) => RepresentationKind::Quaternion,
            RotationEncoding::SixDxy(_) => RepresentationKind::SixDxy,
            RotationEncoding::SixDxz(_) => RepresentationKind::SixDxz,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            RotationEncoding::EulerSinCos(v) | RotationEncoding::SixDxy(v) | RotationEncoding::SixDxz(v) => v,
            RotationEncoding::Quaternion(v) => v,
        }
    }

    /// Wraps a raw network output slice.
    pub fn from_raw(kind: RepresentationKind, raw: &[f64]) -> Result<Self> {
        if raw.len() != kind.size() {
            return Err(Error::EncodingLength { kind: kind.name(), expected: kind.size(), got: raw.len() });
        }
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rotation encoding"));
        }
        Ok(match kind {
            RepresentationKind::EulerSinCos => RotationEncoding::EulerSinCos(raw.try_into().unwrap()),
            RepresentationKind::Quaternion => RotationEncoding::Quaternion(raw.try_into().unwrap()),
            RepresentationKind::SixDxy => RotationEncoding::SixDxy(raw.try_into().unwrap()),
            RepresentationKind::SixDxz => RotationEncoding::SixDxz(raw.try_into().unwrap()),
        })
    }
}

/// Intrinsic Z-Y-X Euler angles `(alpha, beta, gamma)` in radians.
pub fn euler_zyx_to_matrix(alpha: f64, beta: f64, gamma: f64) -> Mat3 {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    Mat3::new(
        ca * cb,
        ca * sb * sg - sa * cg,
        ca * sb * cg + sa * sg,
        sa * cb,
        sa * sb * sg + ca * cg,
        sa * sb * cg - ca * sg,
        -sb,
        cb * sg,
        cb * cg,
    )
}

/// Inverse of [`euler_zyx_to_matrix`] with `beta` in `[-pi/2, pi/2]`.
/// At gimbal lock `gamma` is fixed to 0.
pub fn matrix_to_euler_zyx(r: &Mat3) -> (f64, f64, f64) {
    let cb = r[(0, 0)].hypot(r[(1, 0)]);
    let beta = (-r[(2, 0)]).atan2(cb);
    if cb > GIMBAL_EPS {
        (r[(1, 0)].atan2(r[(0, 0)]), beta, r[(2, 1)].atan2(r[(2, 2)]))
    } else {
        ((-r[(0, 1)]).atan2(r[(1, 1)]), beta, 0.0)
    }
}

fn matrix_to_quaternion(r: &Mat3) -> [f64; 4] {
    // Shepperd: pivot on the largest of w^2, x^2, y^2, z^2
    let tr = r.trace();
    let diag = [r[(0, 0)], r[(1, 1)], r[(2, 2)]];
    let q = if tr >= diag[0] && tr >= diag[1] && tr >= diag[2] {
        let s = 2.0 * (1.0 + tr).sqrt();
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if diag[0] >= diag[1] && diag[0] >= diag[2] {
        let s = 2.0 * (1.0 + diag[0] - diag[1] - diag[2]).sqrt();
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if diag[1] >= diag[2] {
        let s = 2.0 * (1.0 + diag[1] - diag[0] - diag[2]).sqrt();
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = 2.0 * (1.0 + diag[2] - diag[0] - diag[1]).sqrt();
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        q
    }
}

fn quaternion_to_matrix(q: &[f64; 4]) -> Result<Mat3> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::ZeroQuaternion);
    }
    let [w, x, y, z] = q.map(|v| v / n);
    Ok(Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Encodes a proper rotation in the requested representation.
pub fn encode(r: &Mat3, kind: RepresentationKind) -> Result<RotationEncoding> {
    if !is_rotation(r) {
        return Err(Error::InvalidRotation { deviation: rotation_deviation(r) });
    }
    let col = |j: usize| -> [f64; 3] { [r[(0, j)], r[(1, j)], r[(2, j)]] };
    Ok(match kind {
        RepresentationKind::EulerSinCos => {
            let (a, b, g) = matrix_to_euler_zyx(r);
            let (sa, ca) = a.sin_cos();
            let (sb, cb) = b.sin_cos();
            let (sg, cg) = g.sin_cos();
            RotationEncoding::EulerSinCos([sa, ca, sb, cb, sg, cg])
        }
        RepresentationKind::Quaternion => RotationEncoding::Quaternion(matrix_to_quaternion(r)),
        RepresentationKind::SixDxy => {
            let (x, y) = (col(0), col(1));
            RotationEncoding::SixDxy([x[0], x[1], x[2], y[0], y[1], y[2]])
        }
        RepresentationKind::SixDxz => {
            let (x, z) = (col(0), col(2));
            RotationEncoding::SixDxz([x[0], x[1], x[2], z[0], z[1], z[2]])
        }
    })
}

fn sixd_columns(v: &[f64; 6]) -> (Vec3, Vec3) {
    (Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
}

fn unit_or_degenerate(v: Vec3) -> Result<Vec3> {
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateSixD);
    }
    Ok(v / n)
}

/// Decodes a (possibly raw, unnormalized) encoding into an exactly
/// orthonormal rotation matrix.
pub fn decode(e: &RotationEncoding) -> Result<Mat3> {
    if !e.values().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("rotation encoding"));
    }
    match e {
        RotationEncoding::EulerSinCos(v) => {
            let alpha = v[0].atan2(v[1]);
            let beta = v[2].atan2(v[3]);
            let gamma = v[4].atan2(v[5]);
            Ok(euler_zyx_to_matrix(alpha, beta, gamma))
        }
        RotationEncoding::Quaternion(q) => quaternion_to_matrix(q),
        RotationEncoding::SixDxy(v) => {
            let (a, b) = sixd_columns(v);
            let x = unit_or_degenerate(a)?;
            let z_raw = x.cross(&b);
            if b.norm() == 0.0 || z_raw.norm() <= SIXD_PARALLEL_EPS * b.norm() {
                return Err(Error::DegenerateSixD);
            }
            let z = z_raw.normalize();
            let y = z.cross(&x);
            Ok(Mat3::from_columns(&[x, y, z]))
        }
        RotationEncoding::SixDxz(v) => {
            let (a, c) = sixd_columns(v);
            let x = unit_or_degenerate(a)?;
            let y_raw = c.cross(&x);
            if c.norm() == 0.0 || y_raw.norm() <= SIXD_PARALLEL_EPS * c.norm() {
                return Err(Error::DegenerateSixD);
            }
            let y = y_raw.normalize();
            let z = x.cross(&y);
            Ok(Mat3::from_columns(&[x, y, z]))
        }
    }
}

/// Angle of the relative rotation `a^T b` in radians, in `[0, pi]`.
///
/// The cosine comes from the trace and the sine from the skew part, combined
/// with `atan2`; this keeps full precision for both tiny and near-pi angles.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> f64 {
    let m = a.transpose() * b;
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let skew = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = (0.5 * skew.norm()).min(1.0);
    sin.atan2(cos)
}
