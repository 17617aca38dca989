//! Synthetic phantoms with exact ground-truth planes, dataset manifests and
//! patient-grouped folds.
//!
//! A phantom is a region-specific composition of soft-edged ellipsoids and
//! boxes in an anatomy frame, rendered under a rigid pose. Ground-truth planes
//! are the region's canonical planes mapped by the same pose, so annotations
//! never go through interpolation.
//!
//! Manifest schema (JSON):
//!
//! ```text
//! {
//!   "version": 1,
//!   "dims": [32, 32, 32],
//!   "spacing_mm": [5.0, 5.0, 5.0],
//!   "n_folds": 5,
//!   "entries": [{
//!     "id": "knee_0003",
//!     "volume": "volumes/knee_0003",      // stem of .raw/.hdr, relative to the manifest
//!     "region": "knee",
//!     "patient": "knee_p0002",
//!     "fold": 3,
//!     "shape_seed": 1234,
//!     "pose": { "rotation": [[r00, r01, r02], [..], [..]], "translation_mm": [x, y, z] },
//!     "planes": {
//!       "axial":    { "center_mm": [..], "e_u": [..], "e_v": [..] },
//!       "coronal":  { ... },
//!       "sagittal": { ... }
//!     }
//!   }]
//! }
//! ```
//!
//! Plane coordinates are world millimetres with the origin at the volume centre.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, BodyRegion, Mat3, Plane, PlaneTriplet, RigidTransform, Vec3, VolumeMeta};
use crate::rng::{derive_seed, rng_for, uniform_rotation};
use crate::rotation::euler_zyx_to_matrix;
use crate::volume::{read_volume, write_volume, Volume, AIR_HU};

pub const N_FOLDS: usize = 5;

/// Tilt of the calcaneus semi-coronal plane about its row direction.
pub const SEMI_CORONAL_TILT_DEG: f64 = 25.0;

/// Width of the soft edge of every phantom part, in mm.
const EDGE_MM: f64 = 2.0;

const SOFT_TISSUE_HU: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub region: BodyRegion,
    pub meta: VolumeMeta,
    pub pose: RigidTransform,
    pub shape_seed: u64,
    pub oblique_coronal: bool,
}

impl PhantomSpec {
    pub fn new(region: BodyRegion, meta: VolumeMeta, pose: RigidTransform, shape_seed: u64) -> Self {
        Self { region, meta, pose, shape_seed, oblique_coronal: region.has_oblique_coronal() }
    }

    /// 32^3 voxels at 5 mm: the full 160 mm field of view at desk scale.
    pub fn desk_meta() -> VolumeMeta {
        VolumeMeta::cubic(32, 5.0).expect("valid")
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipsoid { center: Vec3, radii: Vec3 },
    Box { center: Vec3, half: Vec3 },
}

#[derive(Debug, Clone, Copy)]
struct Part {
    shape: Shape,
    hu: f64,
}

impl Part {
    fn ellipsoid(center: [f64; 3], radii: [f64; 3], hu: f64) -> Self {
        Self { shape: Shape::Ellipsoid { center: Vec3::from(center), radii: Vec3::from(radii) }, hu }
    }

    fn cuboid(center: [f64; 3], half: [f64; 3], hu: f64) -> Self {
        Self { shape: Shape::Box { center: Vec3::from(center), half: Vec3::from(half) }, hu }
    }

    /// Approximate signed distance in mm, positive inside.
    fn depth(&self, p: &Vec3) -> f64 {
        match self.shape {
            Shape::Ellipsoid { center, radii } => {
                let q = (p - center).component_div(&radii);
                let n = q.norm();
                (1.0 - n) * radii.min()
            }
            Shape::Box { center, half } => {
                let d = (p - center).abs() - half;
                -(d.x.max(d.y).max(d.z))
            }
        }
    }

    fn scaled(self, k: f64) -> Self {
        let shape = match self.shape {
            Shape::Ellipsoid { center, radii } => Shape::Ellipsoid { center: center * k, radii: radii * k },
            Shape::Box { center, half } => Shape::Box { center: center * k, half: half * k },
        };
        Self { shape, ..self }
    }
}

/// Region anatomy in its own frame (mm). The first part is the soft-tissue
/// envelope; later parts paint over earlier ones. Each region carries an
/// off-axis marker so no rotation or mirror maps the phantom onto itself.
fn region_parts(region: BodyRegion) -> Vec<Part> {
    match region {
        BodyRegion::Calcaneus => vec![
            Part::ellipsoid([0.0, 0.0, 0.0], [55.0, 38.0, 40.0], SOFT_TISSUE_HU),
            Part::ellipsoid([5.0, 0.0, -8.0], [35.0, 16.0, 18.0], 650.0),
            Part::ellipsoid([-22.0, 6.0, 16.0], [14.0, 12.0, 12.0], 800.0),
            Part::cuboid([30.0, -18.0, 10.0], [8.0, 5.0, 9.0], 1100.0),
        ],
        BodyRegion::Ankle => vec![
            Part::ellipsoid([0.0, 0.0, 0.0], [42.0, 38.0, 62.0], SOFT_TISSUE_HU),
            Part::ellipsoid([-6.0, 0.0, 22.0], [15.0, 15.0, 38.0], 750.0),
            Part::ellipsoid([20.0, 10.0, 18.0], [6.0, 6.0, 34.0], 700.0),
            Part::ellipsoid([-4.0, 8.0, -26.0], [20.0, 24.0, 12.0], 600.0),
            Part::cuboid([-20.0, -22.0, -10.0], [6.0, 6.0, 10.0], 1100.0),
        ],
        BodyRegion::Knee => vec![
            Part::ellipsoid([0.0, 0.0, 0.0], [48.0, 46.0, 66.0], SOFT_TISSUE_HU),
            Part::ellipsoid([0.0, -4.0, 30.0], [24.0, 20.0, 34.0], 700.0),
            Part::ellipsoid([4.0, 0.0, -32.0], [22.0, 18.0, 30.0], 700.0),
            Part::ellipsoid([2.0, 28.0, 6.0], [10.0, 5.0, 12.0], 900.0),
            Part::cuboid([-30.0, -12.0, -8.0], [5.0, 8.0, 7.0], 1100.0),
        ],
        BodyRegion::Wrist => vec![
            Part::ellipsoid([0.0, 0.0, 0.0], [46.0, 26.0, 64.0], SOFT_TISSUE_HU),
            Part::ellipsoid([-14.0, 0.0, 26.0], [11.0, 9.0, 36.0], 750.0),
            Part::ellipsoid([16.0, 2.0, 30.0], [7.0, 7.0, 32.0], 700.0),
            Part::cuboid([0.0, 0.0, -14.0], [24.0, 10.0, 9.0], 600.0),
            Part::ellipsoid([22.0, -10.0, -34.0], [8.0, 6.0, 14.0], 1000.0),
        ],
    }
}

/// Canonical plane centres in the anatomy frame.
fn canonical_centers(region: BodyRegion) -> [Vec3; 3] {
    match region {
        BodyRegion::Calcaneus => [Vec3::new(5.0, 0.0, -4.0), Vec3::new(12.0, 0.0, -8.0), Vec3::new(5.0, 2.0, -8.0)],
        BodyRegion::Ankle => [Vec3::new(-6.0, 2.0, -12.0), Vec3::new(-4.0, 0.0, -10.0), Vec3::new(-6.0, 4.0, -8.0)],
        BodyRegion::Knee => [Vec3::new(2.0, -2.0, 0.0), Vec3::new(2.0, -4.0, 2.0), Vec3::new(0.0, -2.0, 0.0)],
        BodyRegion::Wrist => [Vec3::new(0.0, 0.0, -6.0), Vec3::new(0.0, 0.0, -8.0), Vec3::new(-2.0, 0.0, -6.0)],
    }
}

/// Ground-truth planes for identity pose: axial normal +z, coronal normal
/// -y, sagittal normal +x. The calcaneus coronal slot is tilted about its
/// row direction.
pub fn canonical_planes(region: BodyRegion, oblique_coronal: bool) -> PlaneTriplet {
    let [ca, cc, cs] = canonical_centers(region);
    let axial = Plane::new(ca, Vec3::x(), Vec3::y()).expect("orthonormal");
    let mut coronal_v = Vec3::z();
    if oblique_coronal {
        coronal_v = axis_angle(Vec3::x(), SEMI_CORONAL_TILT_DEG.to_radians()) * coronal_v;
    }
    let coronal = Plane::new(cc, Vec3::x(), coronal_v).expect("orthonormal");
    let sagittal = Plane::new(cs, Vec3::y(), Vec3::z()).expect("orthonormal");
    PlaneTriplet { axial, coronal, sagittal, region }
}

/// Maps planes through a rigid pose without interpolation.
pub fn pose_planes(planes: &PlaneTriplet, pose: &RigidTransform) -> PlaneTriplet {
    let r = pose.rotation();
    planes
        .map_planes(|p| Plane::new(pose.apply_point(p.center()), r * p.e_u(), r * p.e_v()))
        .expect("rotation preserves orthonormality")
}

fn shape_parts(region: BodyRegion, shape_seed: u64) -> Vec<Part> {
    let mut rng = rng_for(shape_seed, &[region.index() as u64]);
    let k: f64 = rng.gen_range(0.92..1.08);
    region_parts(region)
        .into_iter()
        .map(|p| {
            let jitter: f64 = rng.gen_range(0.94..1.06);
            p.scaled(k * jitter)
        })
        .collect()
}

fn soft_step(depth: f64) -> f64 {
    1.0 / (1.0 + (-depth / (0.5 * EDGE_MM)).exp())
}

fn render_local(parts: &[Part], p: &Vec3) -> f64 {
    parts.iter().fold(AIR_HU as f64, |v, part| {
        let w = soft_step(part.depth(p));
        v * (1.0 - w) + part.hu * w
    })
}

/// Renders a phantom and returns its exact ground-truth planes.
pub fn generate_phantom(spec: &PhantomSpec) -> (Volume, PlaneTriplet) {
    let parts = shape_parts(spec.region, spec.shape_seed);
    let r_t = spec.pose.rotation().transpose();
    let t = *spec.pose.translation();
    let volume = Volume::from_fn(spec.meta, |p| render_local(&parts, &(r_t * (p - t))) as f32);
    let planes = pose_planes(&canonical_planes(spec.region, spec.oblique_coronal), &spec.pose);
    (volume, planes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneRecord {
    pub center_mm: [f64; 3],
    pub e_u: [f64; 3],
    pub e_v: [f64; 3],
}

impl From<&Plane> for PlaneRecord {
    fn from(p: &Plane) -> Self {
        Self { center_mm: (*p.center()).into(), e_u: (*p.e_u()).into(), e_v: (*p.e_v()).into() }
    }
}

impl PlaneRecord {
    pub fn to_plane(&self) -> Result<Plane> {
        Plane::new(self.center_mm.into(), self.e_u.into(), self.e_v.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub axial: PlaneRecord,
    pub coronal: PlaneRecord,
    pub sagittal: PlaneRecord,
}

impl TripletRecord {
    pub fn from_triplet(t: &PlaneTriplet) -> Self {
        Self { axial: (&t.axial).into(), coronal: (&t.coronal).into(), sagittal: (&t.sagittal).into() }
    }

    pub fn to_triplet(&self, region: BodyRegion) -> Result<PlaneTriplet> {
        Ok(PlaneTriplet {
            axial: self.axial.to_plane()?,
            coronal: self.coronal.to_plane()?,
            sagittal: self.sagittal.to_plane()?,
            region,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation_mm: [f64; 3],
}

impl PoseRecord {
    pub fn from_transform(t: &RigidTransform) -> Self {
        let r = t.rotation();
        Self {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation_mm: (*t.translation()).into(),
        }
    }

    pub fn to_transform(&self) -> Result<RigidTransform> {
        let r = Mat3::from_fn(|i, j| self.rotation[i][j]);
        RigidTransform::new(r, self.translation_mm.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: PathBuf,
    pub region: BodyRegion,
    pub patient: String,
    pub fold: usize,
    pub shape_seed: u64,
    pub pose: PoseRecord,
    pub planes: TripletRecord,
}

impl ManifestEntry {
    pub fn ground_truth(&self) -> Result<PlaneTriplet> {
        self.planes.to_triplet(self.region)
    }

    pub fn phantom_spec(&self, meta: VolumeMeta) -> Result<PhantomSpec> {
        Ok(PhantomSpec::new(self.region, meta, self.pose.to_transform()?, self.shape_seed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub n_folds: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Which folds serve as test and validation for a given run fold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldRoles {
    pub test: usize,
    pub validation: usize,
}

impl FoldRoles {
    /// Fold `k` is the test fold, `k + 1 (mod 5)` validation, the rest train.
    pub fn for_fold(k: usize) -> Result<Self> {
        if k >= N_FOLDS {
            return Err(Error::Config(format!("fold {k} out of range 0..{N_FOLDS}")));
        }
        Ok(Self { test: k, validation: (k + 1) % N_FOLDS })
    }

    pub fn is_train(&self, fold: usize) -> bool {
        fold != self.test && fold != self.validation
    }
}

impl DatasetManifest {
    pub fn meta(&self) -> Result<VolumeMeta> {
        VolumeMeta::new(self.dims, self.spacing_mm)
    }

    pub fn indices_in(&self, folds: impl Fn(usize) -> bool) -> Vec<usize> {
        self.entries.iter().enumerate().filter(|(_, e)| folds(e.fold)).map(|(i, _)| i).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "manifest",
            path: PathBuf::from("<memory>"),
            reason: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { what, reason, .. } => Error::Format { what, path: path.to_path_buf(), reason },
            other => other,
        })
    }

    /// Checks fold ranges and patient grouping.
    pub fn validate(&self) -> Result<()> {
        if self.n_folds != N_FOLDS {
            return Err(Error::Config(format!("manifest declares {} folds, expected {N_FOLDS}", self.n_folds)));
        }
        self.meta()?;
        let mut patient_fold: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &self.entries {
            if e.fold >= N_FOLDS {
                return Err(Error::Config(format!("entry {} has fold {}", e.id, e.fold)));
            }
            if let Some(&f) = patient_fold.get(e.patient.as_str()) {
                if f != e.fold {
                    return Err(Error::Config(format!("patient {} spans folds {f} and {}", e.patient, e.fold)));
                }
            }
            patient_fold.insert(&e.patient, e.fold);
            e.ground_truth()?;
            e.pose.to_transform()?;
        }
        Ok(())
    }

    /// Volume counts per `[fold][region]`.
    pub fn fold_region_counts(&self) -> [[usize; BodyRegion::COUNT]; N_FOLDS] {
        let mut c = [[0; BodyRegion::COUNT]; N_FOLDS];
        for e in &self.entries {
            c[e.fold][e.region.index()] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestOptions {
    pub meta: VolumeMeta,
    pub pair_fraction: f64,
    pub hard_fraction: f64,
    pub max_rot_deg: f64,
    pub max_trans_mm: f64,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            meta: PhantomSpec::desk_meta(),
            pair_fraction: 0.3,
            hard_fraction: 0.05,
            max_rot_deg: 45.0,
            max_trans_mm: 10.0,
        }
    }
}

fn sample_pose(rng: &mut impl Rng, opts: &ManifestOptions) -> RigidTransform {
    let rotation = if rng.gen_bool(opts.hard_fraction) {
        // beyond 90 degrees about a random axis
        let axis = uniform_rotation(rng).column(0).into_owned();
        let angle: f64 = rng.gen_range(90.0f64..180.0).to_radians();
        axis_angle(axis, angle)
    } else {
        let m = opts.max_rot_deg.to_radians();
        let mut a = || if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
        let (x, y, z) = (a(), a(), a());
        euler_zyx_to_matrix(x, y, z)
    };
    let t = opts.max_trans_mm;
    let mut b = || if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 };
    let translation = Vec3::new(b(), b(), b());
    RigidTransform::new(rotation, translation).expect("sampled rotation is proper")
}

/// Generates manifest entries for `n_per_region` volumes per region
/// (calcaneus, ankle, knee, wrist) and assigns patients to folds.
///
/// Some patients contribute two volumes (same shape, different pose); both
/// always land in the same fold. Within each region the folds differ in size
/// by at most one volume.
pub fn build_manifest(n_per_region: [usize; 4], seed: u64, opts: &ManifestOptions) -> Result<DatasetManifest> {
    if let Some(n) = n_per_region.iter().find(|&&n| n < N_FOLDS) {
        return Err(Error::Config(format!("need at least {N_FOLDS} volumes per region, got {n}")));
    }
    let mut entries = Vec::new();
    let mut fold_totals = [0usize; N_FOLDS];
    for region in BodyRegion::ALL {
        let n = n_per_region[region.index()];
        let mut rng = rng_for(seed, &[0x3A41, region.index() as u64]);
        // keep at least two singletons per fold so the greedy fill can level the folds
        let max_pairs = n.saturating_sub(2 * N_FOLDS) / 2;
        let n_pairs = ((opts.pair_fraction * n as f64 / 2.0).floor() as usize).min(max_pairs);
        let mut patients: Vec<usize> = vec![2; n_pairs];
        patients.extend(std::iter::repeat_n(1, n - 2 * n_pairs));
        patients.shuffle(&mut rng);
        // largest patients first, then least-loaded fold
        let mut order: Vec<usize> = (0..patients.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(patients[i]));
        let mut counts = [0usize; N_FOLDS];
        let mut patient_fold = vec![0usize; patients.len()];
        for &p in &order {
            let f = (0..N_FOLDS).min_by_key(|&f| (counts[f], fold_totals[f], f)).unwrap();
            patient_fold[p] = f;
            counts[f] += patients[p];
            fold_totals[f] += patients[p];
        }
        let mut vol_idx = 0;
        for (p, &size) in patients.iter().enumerate() {
            let shape_seed = derive_seed(seed, &[0x5EED, region.index() as u64, p as u64]);
            let patient = format!("{}_p{:04}", region.name(), p);
            for _ in 0..size {
                let pose = sample_pose(&mut rng, opts);
                let planes = pose_planes(&canonical_planes(region, region.has_oblique_coronal()), &pose);
                let id = format!("{}_{:04}", region.name(), vol_idx);
                entries.push(ManifestEntry {
                    volume: PathBuf::from("volumes").join(&id),
                    id,
                    region,
                    patient: patient.clone(),
                    fold: patient_fold[p],
                    shape_seed,
                    pose: PoseRecord::from_transform(&pose),
                    planes: TripletRecord::from_triplet(&planes),
                });
                vol_idx += 1;
            }
        }
    }
    let m = DatasetManifest {
        version: 1,
        dims: opts.meta.dims,
        spacing_mm: opts.meta.spacing,
        n_folds: N_FOLDS,
        entries,
    };
    m.validate()?;
    Ok(m)
}

/// Keeps `fraction` of the training volumes of run fold `run_fold`, drawn
/// patient-wise per region. Test and validation folds are untouched.
pub fn reduce_training_set(m: &DatasetManifest, run_fold: usize, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("training fraction must lie in (0, 1], got {fraction}")));
    }
    if ![1.0, 0.8, 0.6, 0.4].contains(&fraction) {
        log::warn!("training fraction {fraction} is outside the standard sweep (1.0, 0.8, 0.6, 0.4)");
    }
    let roles = FoldRoles::for_fold(run_fold)?;
    if fraction == 1.0 {
        return Ok(m.clone());
    }
    let mut keep_patients = std::collections::BTreeSet::new();
    for region in BodyRegion::ALL {
        let mut patients: BTreeMap<&str, usize> = BTreeMap::new();
        for e in m.entries.iter().filter(|e| e.region == region && roles.is_train(e.fold)) {
            *patients.entry(e.patient.as_str()).or_default() += 1;
        }
        let total: usize = patients.values().sum();
        let target = (fraction * total as f64).round() as usize;
        let mut list: Vec<(&str, usize)> = patients.into_iter().collect();
        list.shuffle(&mut rng_for(seed, &[0xF4AC, region.index() as u64]));
        let mut kept = 0;
        for (p, n) in list {
            if kept >= target {
                break;
            }
            // skip a pair that would overshoot when a singleton can still land exactly
            if kept + n > target && n > 1 {
                continue;
            }
            kept += n;
            keep_patients.insert(p.to_string());
        }
    }
    let entries: Vec<ManifestEntry> = m
        .entries
        .iter()
        .filter(|e| !roles.is_train(e.fold) || keep_patients.contains(&e.patient))
        .cloned()
        .collect();
    if !entries.iter().any(|e| roles.is_train(e.fold)) {
        return Err(Error::Empty("training set after reduction".into()));
    }
    Ok(DatasetManifest { entries, ..m.clone() })
}

/// A volume with its annotation, ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Sample {
    pub volume: Volume,
    pub planes: PlaneTriplet,
    pub region: BodyRegion,
    pub patient: String,
    pub fold: usize,
}

/// Renders every manifest entry in memory.
pub fn generate_samples(m: &DatasetManifest) -> Result<Vec<Sample>> {
    let meta = m.meta()?;
    m.entries
        .par_iter()
        .map(|e| {
            let (volume, _) = generate_phantom(&e.phantom_spec(meta)?);
            Ok(Sample { volume, planes: e.ground_truth()?, region: e.region, patient: e.patient.clone(), fold: e.fold })
        })
        .collect()
}

/// Writes every volume under `root` (paths from the manifest) and the
/// manifest itself to `root/manifest.json`.
pub fn write_dataset(m: &DatasetManifest, root: &Path) -> Result<PathBuf> {
    let meta = m.meta()?;
    let vol_dir = root.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    m.entries.par_iter().try_for_each(|e| -> Result<()> {
        let (volume, _) = generate_phantom(&e.phantom_spec(meta)?);
        write_volume(&root.join(&e.volume), &volume, Some(e.region))
    })?;
    let path = root.join("manifest.json");
    m.save(&path)?;
    Ok(path)
}

/// Loads the volumes referenced by a manifest stored at `manifest_path`.
pub fn load_samples(m: &DatasetManifest, manifest_path: &Path) -> Result<Vec<Sample>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    m.entries
        .par_iter()
        .map(|e| {
            let (volume, region) = read_volume(&base.join(&e.volume))?;
            if region.is_some_and(|r| r != e.region) {
                return Err(Error::Format {
                    what: "volume header",
                    path: base.join(&e.volume),
                    reason: format!("region {:?} does not match manifest region {}", region, e.region),
                });
            }
            if volume.meta().dims != m.dims {
                return Err(Error::ShapeMismatch(format!("{} has dims {:?}, manifest says {:?}", e.id, volume.meta().dims, m.dims)));
            }
            Ok(Sample { volume, planes: e.ground_truth()?, region: e.region, patient: e.patient.clone(), fold: e.fold })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::{normalize_volume, resample, rotation_matrix, IntensityParams};
    use crate::config::IntensityConfig;
    use crate::geometry::angle_between;
    use approx::assert_abs_diff_eq;

    fn opts() -> ManifestOptions {
        ManifestOptions::default()
    }

    #[test]
    fn identity_pose_gives_canonical_planes() {
        for region in BodyRegion::ALL {
            let spec = PhantomSpec::new(region, PhantomSpec::desk_meta(), RigidTransform::identity(), 3);
            let (_, planes) = generate_phantom(&spec);
            assert_eq!(planes, canonical_planes(region, region.has_oblique_coronal()));
            assert_abs_diff_eq!(*planes.axial.e_w(), Vec3::z(), epsilon = 0.0);
        }
        let c = canonical_planes(BodyRegion::Calcaneus, true);
        let tilt = angle_between(c.coronal.e_w(), &-Vec3::y()).unwrap();
        assert_abs_diff_eq!(tilt, SEMI_CORONAL_TILT_DEG, epsilon = 1e-12);
    }

    #[test]
    fn pose_rotates_normals() {
        let pose = RigidTransform::new(axis_angle(Vec3::z(), 20f64.to_radians()), Vec3::new(3.0, 0.0, -2.0)).unwrap();
        let spec = PhantomSpec::new(BodyRegion::Knee, PhantomSpec::desk_meta(), pose, 3);
        let (_, planes) = generate_phantom(&spec);
        let canon = canonical_planes(BodyRegion::Knee, false);
        // coronal and sagittal normals lie in the xy plane, so they turn by the full 20 degrees
        for (p, c) in [(&planes.coronal, &canon.coronal), (&planes.sagittal, &canon.sagittal)] {
            assert_abs_diff_eq!(angle_between(p.e_w(), c.e_w()).unwrap(), 20.0, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(angle_between(planes.axial.e_w(), canon.axial.e_w()).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn rendering_commutes_with_resampling() {
        let meta = PhantomSpec::desk_meta();
        let r = axis_angle(Vec3::new(1.0, 2.0, -0.5), 0.35);
        let a = PhantomSpec::new(BodyRegion::Ankle, meta, RigidTransform::identity(), 11);
        let b = PhantomSpec::new(BodyRegion::Ankle, meta, RigidTransform::new(r, Vec3::zeros()).unwrap(), 11);
        let (va, _) = generate_phantom(&a);
        let (vb, _) = generate_phantom(&b);
        let moved = resample(&va, &rotation_matrix(&r), meta.dims).unwrap();
        let ip = IntensityParams::nominal(&IntensityConfig::default()).unwrap();
        let (x, y) = (normalize_volume(&moved, &ip), normalize_volume(&vb, &ip));
        let mae = x.iter().zip(&y).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / x.len() as f64;
        assert!(mae < 0.02, "mean abs difference {mae}");
    }

    #[test]
    fn manifest_one_patient_per_fold() {
        let m = build_manifest([5; 4], 1, &opts()).unwrap();
        for row in m.fold_region_counts() {
            assert_eq!(row, [1; 4]);
        }
    }

    #[test]
    fn manifest_groups_patients_and_balances_folds() {
        for (seed, n) in [(1u64, [160, 220, 274, 250]), (2, [23, 37, 12, 40]), (3, [10, 11, 14, 99])] {
            let m = build_manifest(n, seed, &ManifestOptions { pair_fraction: 0.5, ..opts() }).unwrap();
            assert_eq!(m.entries.len(), n.iter().sum::<usize>());
            let mut folds: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for e in &m.entries {
                folds.entry(&e.patient).or_default().push(e.fold);
            }
            assert!(folds.values().all(|f| f.iter().all(|&x| x == f[0])));
            assert!(folds.values().any(|f| f.len() == 2));
            let counts = m.fold_region_counts();
            for r in 0..4 {
                let per_fold: Vec<usize> = counts.iter().map(|row| row[r]).collect();
                let proportional = n[r] as f64 / N_FOLDS as f64;
                for c in per_fold {
                    assert!((c as f64 - proportional).abs() <= 1.0, "region {r}: {c} vs {proportional}");
                }
            }
        }
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = build_manifest([6, 7, 8, 9], 4, &opts()).unwrap();
        let back = DatasetManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        for (e, b) in m.entries.iter().zip(&back.entries) {
            assert_eq!(e.ground_truth().unwrap(), b.ground_truth().unwrap());
        }
    }

    #[test]
    fn ground_truth_recoverable_from_pose() {
        let m = build_manifest([6; 4], 8, &opts()).unwrap();
        for e in &m.entries {
            let pose = e.pose.to_transform().unwrap();
            let again = pose_planes(&canonical_planes(e.region, e.region.has_oblique_coronal()), &pose);
            assert_eq!(again, e.ground_truth().unwrap());
        }
    }

    #[test]
    fn manifest_rejects_split_patient() {
        let mut m = build_manifest([6; 4], 8, &opts()).unwrap();
        let p = m.entries[0].patient.clone();
        m.entries[1].patient = p;
        m.entries[1].fold = (m.entries[0].fold + 1) % N_FOLDS;
        assert!(DatasetManifest::from_json(&m.to_json()).is_err());
        assert!(build_manifest([4, 5, 5, 5], 1, &opts()).is_err());
    }

    #[test]
    fn reduce_keeps_held_out_folds() {
        let m = build_manifest([40, 40, 40, 40], 5, &opts()).unwrap();
        assert_eq!(reduce_training_set(&m, 0, 1.0, 1).unwrap(), m);
        let roles = FoldRoles::for_fold(0).unwrap();
        let held_out = |m: &DatasetManifest| -> Vec<ManifestEntry> {
            m.entries.iter().filter(|e| !roles.is_train(e.fold)).cloned().collect()
        };
        let train_n = m.entries.iter().filter(|e| roles.is_train(e.fold)).count();
        for fraction in [0.8, 0.6, 0.4] {
            let r = reduce_training_set(&m, 0, fraction, 1).unwrap();
            assert_eq!(held_out(&r), held_out(&m));
            let kept = r.entries.iter().filter(|e| roles.is_train(e.fold)).count();
            let target = fraction * train_n as f64;
            // per-region rounding plus at most one pair of slack per region
            assert!((kept as f64 - target).abs() <= 8.0, "{fraction}: kept {kept} of {train_n}");
            r.validate().unwrap();
        }
        assert!(reduce_training_set(&m, 0, 0.0, 1).is_err());
    }

    #[test]
    fn phantom_has_no_rotational_self_symmetry() {
        let meta = PhantomSpec::desk_meta();
        let ip = IntensityParams::nominal(&IntensityConfig::default()).unwrap();
        let mut rng = rng_for(21, &[]);
        for region in BodyRegion::ALL {
            let base = PhantomSpec::new(region, meta, RigidTransform::identity(), 5);
            let x = normalize_volume(&generate_phantom(&base).0, &ip);
            for _ in 0..25 {
                let r = loop {
                    let r = uniform_rotation(&mut rng);
                    if crate::rotation::geodesic_distance(&Mat3::identity(), &r) > 5f64.to_radians() {
                        break r;
                    }
                };
                let spec = PhantomSpec { pose: RigidTransform::new(r, Vec3::zeros()).unwrap(), ..base };
                let y = normalize_volume(&generate_phantom(&spec).0, &ip);
                let corr = pearson(&x, &y);
                assert!(corr < 0.95, "{region}: correlation {corr}");
            }
        }
    }

    pub(crate) fn pearson(x: &[f32], y: &[f32]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().map(|&v| v as f64).sum::<f64>() / n;
        let my = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (&a, &b) in x.iter().zip(y) {
            let (a, b) = (a as f64 - mx, b as f64 - my);
            sxy += a * b;
            sxx += a * a;
            syy += b * b;
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_manifest([5; 4], 2, &ManifestOptions { meta: VolumeMeta::cubic(8, 20.0).unwrap(), ..opts() }).unwrap();
        let path = write_dataset(&m, dir.path()).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(loaded, m);
        let from_disk = load_samples(&loaded, &path).unwrap();
        let in_memory = generate_samples(&m).unwrap();
        for (a, b) in from_disk.iter().zip(&in_memory) {
            assert_eq!(a.volume, b.volume);
            assert_eq!(a.planes, b.planes);
        }
    }
}
