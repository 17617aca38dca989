//! Plane coupling, per-volume errors, the weighted plane score and fold
//! aggregation.
//!
//! Error definitions for predicted plane `p` against annotation `t`:
//!
//! * `d`: absolute distance of `p.center - t.center` along `t.e_w` (mm).
//! * `eps_n`: angle between the normals (degrees).
//! * `eps_i`: mean angle between `t.e_u`/`t.e_v` and `p.e_u`/`p.e_v` after
//!   projecting the predicted directions onto the annotated plane (degrees).
//!
//! Score: `p = mean over planes of (0.2 d + 0.6 eps_n + 0.2 eps_i)`.
//!
//! Report schema (JSON):
//!
//! ```text
//! {
//!   "label": "6D_xy",
//!   "rows": [{
//!     "region": "calcaneus" | ... | "all",
//!     "n_folds": 5, "n_volumes": 160,
//!     "d":     { "mean": .., "std": .. },
//!     "eps_n": { "mean": .., "std": .. },
//!     "eps_i": { "mean": .., "std": .. },
//!     "score": { "mean": .., "std": .. }
//!   }]
//! }
//! ```
//!
//! Each statistic is the mean and sample standard deviation (n - 1) across
//! folds of the per-fold median over volumes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{normalize_volume, IntensityParams};
use crate::config::IntensityConfig;
use crate::error::{Error, Result};
use crate::geometry::{angle_between, BodyRegion, Plane, PlaneTriplet, Vec3};
use crate::model::{outputs_to_planes, ClassInput, ModelState};
use crate::phantom::Sample;

pub const W_D: f64 = 0.2;
pub const W_N: f64 = 0.6;
pub const W_I: f64 = 0.2;

/// Normals closer than this are treated as parallel by the coupling.
pub const MIN_NORMAL_SEPARATION_DEG: f64 = 1.0;

/// Which normals the coupling makes orthogonal to the axial normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CouplingRules {
    pub coronal_orthogonal: bool,
    pub sagittal_orthogonal: bool,
}

impl CouplingRules {
    /// All three planes for ankle, knee and wrist; axial-sagittal only for
    /// the calcaneus, whose semi-coronal plane is oblique.
    pub fn for_region(region: BodyRegion) -> Self {
        Self { coronal_orthogonal: !region.has_oblique_coronal(), sagittal_orthogonal: true }
    }
}

fn unit(v: Vec3, what: &'static str) -> Result<Vec3> {
    let n = v.norm();
    if n < 1e-12 || !n.is_finite() {
        return Err(Error::ZeroVector(what));
    }
    Ok(v / n)
}

fn check_separation(a: &Vec3, b: &Vec3, what: &str) -> Result<()> {
    let ang = angle_between(a, b)?;
    if ang.min(180.0 - ang) < MIN_NORMAL_SEPARATION_DEG {
        return Err(Error::Numerical(format!("{what} normals are {ang:.3} degrees apart; coupling skipped")));
    }
    Ok(())
}

/// Rebuilds a plane with normal `n`, taking `e_u` along its intersection
/// with the axial plane (sign kept closest to the current `e_u`).
fn align_to_axial(p: &Plane, n_axial: &Vec3, n: Vec3) -> Result<Plane> {
    let mut e_u = unit(n_axial.cross(&n), "plane intersection")?;
    if e_u.dot(p.e_u()) < 0.0 {
        e_u = -e_u;
    }
    let e_v = n.cross(&e_u);
    Plane::new(*p.center(), e_u, e_v)
}

/// Enforces the expected angular relations with the axial plane as
/// reference. Coronal and sagittal planes are turned in-plane so that their
/// intersection with the axial plane runs along their `e_u`; where the rules
/// demand it, normals are made orthogonal (the sagittal normal becomes the
/// cross product of the axial and coronal normals). Centres and the axial
/// plane never change.
pub fn couple_planes(pred: &PlaneTriplet, rules: CouplingRules) -> Result<PlaneTriplet> {
    let n_a = *pred.axial.e_w();
    check_separation(&n_a, pred.coronal.e_w(), "axial and coronal")?;
    check_separation(&n_a, pred.sagittal.e_w(), "axial and sagittal")?;
    let mut n_c = *pred.coronal.e_w();
    if rules.coronal_orthogonal {
        n_c = unit(n_c - n_a * n_a.dot(&n_c), "coronal normal")?;
    }
    let n_s = if rules.sagittal_orthogonal && rules.coronal_orthogonal {
        let s = unit(n_a.cross(&n_c), "sagittal normal")?;
        if s.dot(pred.sagittal.e_w()) < 0.0 {
            -s
        } else {
            s
        }
    } else if rules.sagittal_orthogonal {
        let s = *pred.sagittal.e_w();
        unit(s - n_a * n_a.dot(&s), "sagittal normal")?
    } else {
        *pred.sagittal.e_w()
    };
    Ok(PlaneTriplet {
        axial: pred.axial,
        coronal: align_to_axial(&pred.coronal, &n_a, n_c)?,
        sagittal: align_to_axial(&pred.sagittal, &n_a, n_s)?,
        region: pred.region,
    })
}

/// Angle in degrees between the axial intersection line of `p` and `p.e_u`,
/// measured in `p`'s own coordinates (0 to 90).
pub fn intersection_angle(axial: &Plane, p: &Plane) -> Result<f64> {
    let l = unit(axial.e_w().cross(p.e_w()), "plane intersection")?;
    Ok(l.dot(p.e_v()).abs().atan2(l.dot(p.e_u()).abs()).to_degrees())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneErrors {
    pub d: f64,
    pub eps_n: f64,
    pub eps_i: f64,
}

impl PlaneErrors {
    pub fn weighted(&self) -> f64 {
        W_D * self.d + W_N * self.eps_n + W_I * self.eps_i
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub region: BodyRegion,
    pub fold: usize,
    /// Axial, coronal, sagittal.
    pub planes: [PlaneErrors; 3],
    pub score: f64,
}

impl ScoreReport {
    /// Plane-averaged components.
    pub fn mean_errors(&self) -> PlaneErrors {
        let m = |f: fn(&PlaneErrors) -> f64| self.planes.iter().map(f).sum::<f64>() / 3.0;
        PlaneErrors { d: m(|p| p.d), eps_n: m(|p| p.eps_n), eps_i: m(|p| p.eps_i) }
    }
}

pub fn plane_errors(pred: &Plane, truth: &Plane, name: &str) -> Result<PlaneErrors> {
    let n = truth.e_w();
    let d = (pred.center() - truth.center()).dot(n).abs();
    let eps_n = angle_between(pred.e_w(), n)?;
    let projected = |v: &Vec3| -> Result<Vec3> {
        let p = v - n * n.dot(v);
        if p.norm() < 1e-12 {
            return Err(Error::Numerical(format!("{name}: predicted in-plane direction is parallel to the annotated normal")));
        }
        Ok(p)
    };
    let eps_u = angle_between(&projected(pred.e_u())?, truth.e_u())?;
    let eps_v = angle_between(&projected(pred.e_v())?, truth.e_v())?;
    Ok(PlaneErrors { d, eps_n, eps_i: 0.5 * (eps_u + eps_v) })
}

pub fn score(pred: &PlaneTriplet, truth: &PlaneTriplet, fold: usize) -> Result<ScoreReport> {
    if pred.region != truth.region {
        return Err(Error::RegionMismatch { pred: pred.region.to_string(), truth: truth.region.to_string() });
    }
    let mut planes = [PlaneErrors { d: 0.0, eps_n: 0.0, eps_i: 0.0 }; 3];
    for (j, (p, t)) in pred.planes().iter().zip(truth.planes()).enumerate() {
        planes[j] = plane_errors(p, t, PlaneTriplet::NAMES[j])?;
    }
    let score = planes.iter().map(PlaneErrors::weighted).sum::<f64>() / 3.0;
    Ok(ScoreReport { region: truth.region, fold, planes, score })
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub region: String,
    pub n_folds: usize,
    pub n_volumes: usize,
    pub d: MeanStd,
    pub eps_n: MeanStd,
    pub eps_i: MeanStd,
    pub score: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn row(&self, region: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.region == region)
    }
}

fn summarize(label: &str, reports: &[&ScoreReport]) -> Result<SummaryRow> {
    let mut by_fold: BTreeMap<usize, Vec<&ScoreReport>> = BTreeMap::new();
    for r in reports {
        by_fold.entry(r.fold).or_default().push(r);
    }
    if by_fold.is_empty() {
        return Err(Error::Empty(format!("reports for {label}")));
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    for fold in by_fold.values() {
        let comps: Vec<PlaneErrors> = fold.iter().map(|r| r.mean_errors()).collect();
        let col = |f: &dyn Fn(usize) -> f64| {
            let mut v: Vec<f64> = (0..fold.len()).map(f).collect();
            median(&mut v).expect("fold is non-empty")
        };
        let d = col(&|i| comps[i].d);
        let n = col(&|i| comps[i].eps_n);
        let ii = col(&|i| comps[i].eps_i);
        let s = col(&|i| fold[i].score);
        for (c, v) in cols.iter_mut().zip([d, n, ii, s]) {
            c.push(v);
        }
    }
    Ok(SummaryRow {
        region: label.to_string(),
        n_folds: by_fold.len(),
        n_volumes: reports.len(),
        d: mean_std(&cols[0]),
        eps_n: mean_std(&cols[1]),
        eps_i: mean_std(&cols[2]),
        score: mean_std(&cols[3]),
    })
}

/// Per region (and over all regions): per-fold medians of the plane-averaged
/// errors and score, then mean and sample std across folds.
pub fn aggregate(label: &str, reports: &[ScoreReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::Empty("score reports".into()));
    }
    let mut rows = Vec::new();
    for region in BodyRegion::ALL {
        let subset: Vec<&ScoreReport> = reports.iter().filter(|r| r.region == region).collect();
        if !subset.is_empty() {
            rows.push(summarize(region.name(), &subset)?);
        }
    }
    rows.push(summarize("all", &reports.iter().collect::<Vec<_>>())?);
    Ok(Summary { label: label.to_string(), rows })
}

/// Plain-text table: one block per summary, `mean ± std` per column.
pub fn format_table(title: &str, summaries: &[Summary]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(
        s,
        "{:<14} {:<10} {:>15} {:>15} {:>15} {:>15}",
        "setting", "region", "d [mm]", "eps_n [deg]", "eps_i [deg]", "score"
    );
    let cell = |m: &MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
    for sum in summaries {
        for r in &sum.rows {
            let _ = writeln!(
                s,
                "{:<14} {:<10} {:>15} {:>15} {:>15} {:>15}",
                sum.label,
                r.region,
                cell(&r.d),
                cell(&r.eps_n),
                cell(&r.eps_i),
                cell(&r.score)
            );
        }
    }
    s
}

/// Regressed planes and their coupled counterparts for one volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub regressed: ScoreReport,
    pub coupled: ScoreReport,
    pub prediction: PlaneTriplet,
}

/// Runs the model on every sample (eval mode, nominal intensity) and scores
/// the raw and coupled predictions. When coupling is degenerate the raw
/// prediction is kept for the coupled score.
pub fn evaluate_model(
    state: &ModelState<f32>,
    samples: &[Sample],
    intensity: &IntensityConfig,
    class: ClassInput,
) -> Result<Vec<Evaluated>> {
    let ip = IntensityParams::nominal(intensity)?;
    let cfg = state.config();
    samples
        .par_iter()
        .map(|s| {
            if s.volume.meta().dims != cfg.input_dims {
                return Err(Error::ShapeMismatch(format!(
                    "volume dims {:?} differ from model input {:?}",
                    s.volume.meta().dims,
                    cfg.input_dims
                )));
            }
            let input = normalize_volume(&s.volume, &ip);
            let raw = state.predict_raw(&input, s.region, class)?;
            let prediction = outputs_to_planes(&raw, cfg.repr, s.region, s.volume.meta())?;
            let regressed = score(&prediction, &s.planes, s.fold)?;
            let coupled = match couple_planes(&prediction, CouplingRules::for_region(s.region)) {
                Ok(c) => score(&c, &s.planes, s.fold)?,
                Err(e) => {
                    log::warn!("plane coupling skipped: {e}");
                    regressed.clone()
                }
            };
            Ok(Evaluated { regressed, coupled, prediction })
        })
        .collect()
}

/// Median score over evaluated volumes (raw predictions).
pub fn median_score(evals: &[Evaluated]) -> f64 {
    let mut v: Vec<f64> = evals.iter().map(|e| e.regressed.score).collect();
    median(&mut v).unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use crate::phantom::canonical_planes;
    use crate::rng::{rng_for, uniform_rotation};
    use rand::Rng;

    fn rotate_in_plane(p: &Plane, deg: f64) -> Plane {
        let r = axis_angle(*p.e_w(), deg.to_radians());
        Plane::new(*p.center(), r * p.e_u(), r * p.e_v()).unwrap()
    }

    fn posed(region: BodyRegion, seed: u64) -> PlaneTriplet {
        let r = uniform_rotation(&mut rng_for(seed, &[]));
        canonical_planes(region, region.has_oblique_coronal())
            .map_planes(|p| Plane::new(r * p.center(), r * p.e_u(), r * p.e_v()))
            .unwrap()
    }

    #[test]
    fn coupled_triplet_is_a_fixed_point() {
        for region in BodyRegion::ALL {
            let t = posed(region, 3);
            let c = couple_planes(&t, CouplingRules::for_region(region)).unwrap();
            for (a, b) in c.planes().iter().zip(t.planes()) {
                assert!((a.frame() - b.frame()).abs().max() < 1e-12, "{region}");
                assert_eq!(a.center(), b.center());
            }
        }
    }

    #[test]
    fn in_plane_rotation_is_undone() {
        let t = posed(BodyRegion::Knee, 5);
        let mut pred = t;
        pred.coronal = rotate_in_plane(&t.coronal, 5.0);
        assert!((intersection_angle(&pred.axial, &pred.coronal).unwrap() - 5.0).abs() < 1e-9);
        let c = couple_planes(&pred, CouplingRules::for_region(BodyRegion::Knee)).unwrap();
        assert!(intersection_angle(&c.axial, &c.coronal).unwrap() < 1e-9);
        assert!((c.coronal.e_w() - pred.coronal.e_w()).norm() < 1e-12);
    }

    #[test]
    fn coupling_keeps_translation_error() {
        let mut rng = rng_for(9, &[]);
        for region in BodyRegion::ALL {
            let truth = posed(region, 7);
            let pred = truth
                .map_planes(|p| {
                    let r = axis_angle(Vec3::new(rng.gen(), rng.gen(), rng.gen()), rng.gen_range(0.0..0.3));
                    Plane::new(p.center() + Vec3::new(rng.gen(), rng.gen(), rng.gen()) * 4.0, r * p.e_u(), r * p.e_v())
                })
                .unwrap();
            let c = couple_planes(&pred, CouplingRules::for_region(region)).unwrap();
            let (a, b) = (score(&pred, &truth, 0).unwrap(), score(&c, &truth, 0).unwrap());
            for j in 0..3 {
                assert_eq!(a.planes[j].d.to_bits(), b.planes[j].d.to_bits());
            }
            assert_eq!(c.axial, pred.axial);
        }
    }

    #[test]
    fn parallel_normals_are_reported() {
        let t = posed(BodyRegion::Wrist, 1);
        let mut pred = t;
        pred.coronal = Plane::new(*t.coronal.center(), *t.axial.e_u(), *t.axial.e_v()).unwrap();
        assert!(matches!(couple_planes(&pred, CouplingRules::for_region(BodyRegion::Wrist)), Err(Error::Numerical(_))));
    }

    #[test]
    fn score_of_truth_is_zero() {
        let t = posed(BodyRegion::Ankle, 2);
        let r = score(&t, &t, 1).unwrap();
        assert!(r.score.abs() < 1e-12);
        assert!(r.planes.iter().all(|p| p.d == 0.0 && p.eps_n < 1e-12 && p.eps_i < 1e-12));
        let wrong = PlaneTriplet { region: BodyRegion::Knee, ..t };
        assert!(score(&wrong, &t, 1).is_err());
    }

    #[test]
    fn in_plane_offset_has_no_normal_distance() {
        let t = posed(BodyRegion::Ankle, 2);
        let mut pred = t;
        pred.axial = t.axial.with_center(t.axial.center() + t.axial.e_u() * 3.0 + t.axial.e_v() * 4.0);
        let r = score(&pred, &t, 0).unwrap();
        assert!(r.planes[0].d < 1e-12);
        pred.axial = t.axial.with_center(t.axial.center() + t.axial.e_w() * 2.5);
        assert!((score(&pred, &t, 0).unwrap().planes[0].d - 2.5).abs() < 1e-12);
    }

    #[test]
    fn constructed_rotation_errors() {
        let t = posed(BodyRegion::Knee, 4);
        let mut pred = t;
        // tilt about e_u: normal and e_v move by 10 degrees, e_u stays
        pred.sagittal = {
            let r = axis_angle(*t.sagittal.e_u(), 10f64.to_radians());
            Plane::new(*t.sagittal.center(), r * t.sagittal.e_u(), r * t.sagittal.e_v()).unwrap()
        };
        pred.coronal = rotate_in_plane(&t.coronal, 7.0);
        let r = score(&pred, &t, 0).unwrap();
        assert!((r.planes[2].eps_n - 10.0).abs() < 1e-9);
        // projecting e_v back onto the plane recovers it exactly
        assert!(r.planes[2].eps_i.abs() < 1e-9);
        assert!(r.planes[1].eps_n.abs() < 1e-9);
        assert!((r.planes[1].eps_i - 7.0).abs() < 1e-9);
        let expected = (0.6 * 10.0 + 0.2 * 7.0) / 3.0;
        assert!((r.score - expected).abs() < 1e-9);
    }

    #[test]
    fn weighted_score_by_hand() {
        let e = PlaneErrors { d: 9.94, eps_n: 8.08, eps_i: 8.09 };
        assert!((e.weighted() - 8.454).abs() < 1e-12);
    }

    fn report(region: BodyRegion, fold: usize, v: f64) -> ScoreReport {
        let e = PlaneErrors { d: v, eps_n: v, eps_i: v };
        ScoreReport { region, fold, planes: [e; 3], score: e.weighted() }
    }

    #[test]
    fn aggregate_single_volume() {
        let s = aggregate("x", &[report(BodyRegion::Knee, 0, 3.0)]).unwrap();
        let row = s.row("knee").unwrap();
        assert_eq!(row.d, MeanStd { mean: 3.0, std: 0.0 });
        assert_eq!(s.row("all").unwrap().n_volumes, 1);
        assert!(s.row("wrist").is_none());
        assert!(aggregate("x", &[]).is_err());
    }

    #[test]
    fn aggregate_fold_medians() {
        let mut reports = Vec::new();
        for v in [7.0, 8.0, 100.0] {
            reports.push(report(BodyRegion::Ankle, 0, v));
        }
        for v in [1.0, 10.0, 12.0, 10.0] {
            reports.push(report(BodyRegion::Ankle, 1, v));
        }
        let row = aggregate("x", &reports).unwrap().row("ankle").unwrap().clone();
        assert_eq!(row.n_folds, 2);
        assert_eq!(row.d.mean, 9.0);
        assert!((row.d.std - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn score_commutes_with_means() {
        let mut rng = rng_for(5, &[]);
        let errs: Vec<PlaneErrors> =
            (0..20).map(|_| PlaneErrors { d: rng.gen_range(0.0..20.0), eps_n: rng.gen_range(0.0..90.0), eps_i: rng.gen_range(0.0..90.0) }).collect();
        let n = errs.len() as f64;
        let mean = PlaneErrors {
            d: errs.iter().map(|e| e.d).sum::<f64>() / n,
            eps_n: errs.iter().map(|e| e.eps_n).sum::<f64>() / n,
            eps_i: errs.iter().map(|e| e.eps_i).sum::<f64>() / n,
        };
        let mean_of_scores = errs.iter().map(PlaneErrors::weighted).sum::<f64>() / n;
        assert!((mean.weighted() - mean_of_scores).abs() < 1e-12);
    }

    #[test]
    fn table_lists_every_row() {
        let s = aggregate("6D_xy", &[report(BodyRegion::Knee, 0, 3.0), report(BodyRegion::Wrist, 1, 2.0)]).unwrap();
        let t = format_table("demo", &[s]);
        assert_eq!(t.lines().count(), 2 + 3);
        assert!(t.contains("3.00 ± 0.00"));
    }
}
