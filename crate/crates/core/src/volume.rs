//! Dense scalar volumes, trilinear sampling, MPR reslicing and the raw volume
//! file format.
//!
//! File format: `<stem>.raw` holds the voxels as little-endian `f32` with the
//! x index varying fastest, `<stem>.hdr` is a `key=value` text sidecar:
//!
//! ```text
//! dims=32 32 32
//! spacing_mm=5 5 5
//! region=knee
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{BodyRegion, Plane, Vec3, VolumeMeta};

/// Out-of-bounds samples read as air.
pub const AIR_HU: f32 = -1000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    meta: VolumeMeta,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(meta: VolumeMeta, voxels: Vec<f32>) -> Result<Self> {
        if voxels.len() != meta.voxel_count() {
            return Err(Error::ShapeMismatch(format!(
                "volume {:?} needs {} voxels, got {}",
                meta.dims,
                meta.voxel_count(),
                voxels.len()
            )));
        }
        if !voxels.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("volume voxels"));
        }
        Ok(Self { meta, voxels })
    }

    pub fn filled(meta: VolumeMeta, value: f32) -> Self {
        Self { voxels: vec![value; meta.voxel_count()], meta }
    }

    /// Builds a volume by evaluating `f` at every voxel centre (world mm).
    pub fn from_fn(meta: VolumeMeta, mut f: impl FnMut(&Vec3) -> f32) -> Self {
        let [nx, ny, nz] = meta.dims;
        let mut voxels = Vec::with_capacity(meta.voxel_count());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    voxels.push(f(&meta.voxel_to_world([i as f64, j as f64, k as f64])));
                }
            }
        }
        Self { meta, voxels }
    }

    pub fn meta(&self) -> &VolumeMeta {
        &self.meta
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        let [nx, ny, _] = self.meta.dims;
        (k * ny + j) * nx + i
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[self.index(i, j, k)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume { meta: self.meta, voxels: self.voxels.iter().map(|&v| f(v)).collect() }
    }

    /// Trilinear sample at fractional voxel coordinates; `None` outside
    /// `[0, n-1]` on any axis. Integer coordinates return the stored voxel
    /// exactly.
    pub fn sample_voxel(&self, idx: [f64; 3]) -> Option<f64> {
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.meta.dims[a];
            let x = idx[a];
            if !(x >= 0.0 && x <= (n - 1) as f64) {
                return None;
            }
            let i0 = x.floor();
            base[a] = i0 as usize;
            frac[a] = x - i0;
            next[a] = (base[a] + 1).min(n - 1);
        }
        let v = |i: usize, j: usize, k: usize| self.get(i, j, k) as f64;
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a * (1.0 - t) + b * t };
        let c00 = lerp(v(base[0], base[1], base[2]), v(next[0], base[1], base[2]), fx);
        let c10 = lerp(v(base[0], next[1], base[2]), v(next[0], next[1], base[2]), fx);
        let c01 = lerp(v(base[0], base[1], next[2]), v(next[0], base[1], next[2]), fx);
        let c11 = lerp(v(base[0], next[1], next[2]), v(next[0], next[1], next[2]), fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        Some(lerp(c0, c1, fz))
    }

    /// Trilinear sample at a world position, air outside the grid.
    pub fn sample_world(&self, p: &Vec3) -> f64 {
        self.sample_voxel(self.meta.world_to_voxel(p)).unwrap_or(AIR_HU as f64)
    }
}

/// Samples an `n_u x n_v` MPR image of `plane` with `step_mm` pixel spacing,
/// centred on the plane centre. Row-major with `u` fastest.
pub fn reslice(volume: &Volume, plane: &Plane, n_u: usize, n_v: usize, step_mm: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_u * n_v);
    let cu = (n_u as f64 - 1.0) * 0.5;
    let cv = (n_v as f64 - 1.0) * 0.5;
    for b in 0..n_v {
        for a in 0..n_u {
            let p = plane.center()
                + plane.e_u() * ((a as f64 - cu) * step_mm)
                + plane.e_v() * ((b as f64 - cv) * step_mm);
            out.push(volume.sample_world(&p));
        }
    }
    out
}

fn sidecar_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("raw"), stem.with_extension("hdr"))
}

pub fn write_volume(stem: &Path, volume: &Volume, region: Option<BodyRegion>) -> Result<()> {
    let (raw, hdr) = sidecar_paths(stem);
    let mut bytes = Vec::with_capacity(volume.voxels.len() * 4);
    for v in &volume.voxels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let [dx, dy, dz] = volume.meta.dims;
    let [sx, sy, sz] = volume.meta.spacing;
    let mut text = format!("dims={dx} {dy} {dz}\nspacing_mm={sx} {sy} {sz}\n");
    if let Some(r) = region {
        text.push_str(&format!("region={r}\n"));
    }
    fs::write(&hdr, text).map_err(|e| Error::io(&hdr, e))
}

pub fn read_volume(stem: &Path) -> Result<(Volume, Option<BodyRegion>)> {
    let (raw, hdr) = sidecar_paths(stem);
    let bad = |reason: String| Error::Format { what: "volume header", path: hdr.clone(), reason };
    let text = fs::read_to_string(&hdr).map_err(|e| Error::io(&hdr, e))?;
    let (mut dims, mut spacing, mut region) = (None, None, None);
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, value) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got '{line}'")))?;
        let nums = |n: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = value
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|e| bad(format!("{key}: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != n {
                return Err(bad(format!("{key} needs {n} values")));
            }
            Ok(v)
        };
        match key.trim() {
            "dims" => {
                let v = nums(3)?;
                if v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
                    return Err(bad("dims must be non-negative integers".into()));
                }
                dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
            }
            "spacing_mm" => {
                let v = nums(3)?;
                spacing = Some([v[0], v[1], v[2]]);
            }
            "region" => region = Some(value.trim().parse::<BodyRegion>()?),
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
    }
    let meta = VolumeMeta::new(
        dims.ok_or_else(|| bad("missing dims".into()))?,
        spacing.ok_or_else(|| bad("missing spacing_mm".into()))?,
    )?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != meta.voxel_count() * 4 {
        return Err(Error::Format {
            what: "volume data",
            path: raw,
            reason: format!("expected {} bytes, found {}", meta.voxel_count() * 4, bytes.len()),
        });
    }
    let voxels = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((Volume::new(meta, voxels)?, region))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        let meta = VolumeMeta::new([4, 5, 6], [1.0, 2.0, 0.5]).unwrap();
        Volume::from_fn(meta, |p| (p.x + 2.0 * p.y - p.z) as f32)
    }

    #[test]
    fn trilinear_is_exact_on_linear_fields() {
        let v = ramp();
        let p = Vec3::new(-0.3, 1.7, -0.9);
        assert!((v.sample_world(&p) - (p.x + 2.0 * p.y - p.z)).abs() < 1e-5);
        assert_eq!(v.sample_voxel([3.0, 4.0, 5.0]), Some(v.get(3, 4, 5) as f64));
        assert_eq!(v.sample_voxel([3.0001, 0.0, 0.0]), None);
        assert_eq!(v.sample_world(&Vec3::new(100.0, 0.0, 0.0)), AIR_HU as f64);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("vol");
        let v = ramp();
        write_volume(&stem, &v, Some(BodyRegion::Knee)).unwrap();
        let (back, region) = read_volume(&stem).unwrap();
        assert_eq!(back, v);
        assert_eq!(region, Some(BodyRegion::Knee));
        let hdr = std::fs::read_to_string(stem.with_extension("hdr")).unwrap();
        assert!(hdr.starts_with("dims=4 5 6\nspacing_mm=1 2 0.5\nregion=knee\n"));
    }

    #[test]
    fn bad_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("vol");
        write_volume(&stem, &ramp(), None).unwrap();
        std::fs::write(stem.with_extension("raw"), [0u8; 12]).unwrap();
        assert!(matches!(read_volume(&stem), Err(Error::Format { .. })));
        std::fs::write(stem.with_extension("hdr"), "dims=4 5\n").unwrap();
        assert!(matches!(read_volume(&stem), Err(Error::Format { .. })));
    }

    #[test]
    fn new_checks_length() {
        let meta = VolumeMeta::cubic(2, 1.0).unwrap();
        assert!(Volume::new(meta, vec![0.0; 7]).is_err());
        assert!(Volume::new(meta, vec![f32::NAN; 8]).is_err());
    }
}
