//! Experiment drivers: per-fold train/evaluate, representation ablation,
//! training-set size sweep, class-information corruption and hyperparameter
//! random search.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate_model, format_table, median_score, Evaluated, ScoreReport, Summary};
use crate::model::{ClassInput, ModelConfig, ModelState, Variant};
use crate::phantom::{build_manifest, generate_samples, load_samples, reduce_training_set, DatasetManifest, FoldRoles, ManifestOptions, Sample};
use crate::rng::{derive_seed, rng_for};
use crate::rotation::RepresentationKind;
use crate::training::{sample_hyperparams, train, Hyperparams, TrainOptions, TrainOutcome};
use crate::geometry::VolumeMeta;

/// Manifest options from the `[data]` section.
pub fn manifest_options(cfg: &RunConfig) -> Result<ManifestOptions> {
    Ok(ManifestOptions {
        meta: VolumeMeta::cubic(cfg.data.dims, cfg.data.spacing_mm)?,
        pair_fraction: cfg.data.pair_fraction,
        hard_fraction: cfg.data.hard_fraction,
        ..ManifestOptions::default()
    })
}

/// Builds the manifest described by `[data]`.
pub fn manifest_from_config(cfg: &RunConfig) -> Result<DatasetManifest> {
    build_manifest(cfg.data.n_per_region, cfg.seed, &manifest_options(cfg)?)
}

/// Loads the manifest at `cfg.manifest` and its volumes; without a manifest
/// path the dataset is generated in memory from `[data]`.
pub fn load_dataset(cfg: &RunConfig) -> Result<(DatasetManifest, Vec<Sample>)> {
    match &cfg.manifest {
        Some(path) => {
            let m = DatasetManifest::load(path)?;
            let samples = load_samples(&m, path)?;
            Ok((m, samples))
        }
        None => {
            let m = manifest_from_config(cfg)?;
            let samples = generate_samples(&m)?;
            Ok((m, samples))
        }
    }
}

pub fn train_options(cfg: &RunConfig, workers: usize, out_dir: Option<PathBuf>) -> TrainOptions {
    TrainOptions {
        hyper: cfg.hyperparams(),
        augment: cfg.train.augment,
        aug: cfg.aug.clone(),
        intensity: cfg.intensity.clone(),
        seed: cfg.seed,
        workers,
        epoch_len: None,
        out_dir,
    }
}

/// Samples of a manifest split into (train, validation, test) for run fold `k`.
pub fn split(samples: &[Sample], fold: usize) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let roles = FoldRoles::for_fold(fold)?;
    let pick = |f: &dyn Fn(usize) -> bool| samples.iter().filter(|s| f(s.fold)).cloned().collect::<Vec<_>>();
    let train = pick(&|f| roles.is_train(f));
    let val = pick(&|f| f == roles.validation);
    let test = pick(&|f| f == roles.test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Empty(format!("train or test split of fold {fold}")));
    }
    Ok((train, val, test))
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub outcome: TrainOutcome,
    pub evaluated: Vec<Evaluated>,
}

/// Trains on the training folds of run fold `fold`, selects the checkpoint
/// on the validation fold and evaluates it on the test fold.
pub fn train_and_evaluate(
    model_cfg: &ModelConfig,
    samples: &[Sample],
    fold: usize,
    opts: &TrainOptions,
) -> Result<FoldResult> {
    let (train_set, val_set, test_set) = split(samples, fold)?;
    let opts = TrainOptions { seed: derive_seed(opts.seed, &[0xF01D, fold as u64]), ..opts.clone() };
    let outcome = train(model_cfg, &train_set, &val_set, &opts)?;
    let evaluated = evaluate_model(&outcome.best_state, &test_set, &opts.intensity, ClassInput::OneHot)?;
    Ok(FoldResult { fold, outcome, evaluated })
}

/// Untrained (initialization only) median test score for a fold.
pub fn untrained_median_score(model_cfg: &ModelConfig, samples: &[Sample], fold: usize, opts: &TrainOptions) -> Result<f64> {
    let (_, _, test_set) = split(samples, fold)?;
    let seed = derive_seed(derive_seed(opts.seed, &[0xF01D, fold as u64]), &[0x1417]);
    let state = ModelState::<f32>::init(model_cfg, seed)?;
    Ok(median_score(&evaluate_model(&state, &test_set, &opts.intensity, ClassInput::OneHot)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonBlock {
    pub setting: String,
    pub regressed: Summary,
    pub post_processed: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub experiment: String,
    pub variant: Variant,
    pub folds: Vec<usize>,
    pub blocks: Vec<ComparisonBlock>,
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut summaries = Vec::new();
        for b in &self.blocks {
            summaries.push(Summary { label: format!("{} regr.", b.setting), rows: b.regressed.rows.clone() });
            summaries.push(Summary { label: format!("{} post", b.setting), rows: b.post_processed.rows.clone() });
        }
        format_table(&format!("{} ({} variant, folds {:?})", self.experiment, self.variant, self.folds), &summaries)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.table()).map_err(|e| Error::io(&txt, e))
    }
}

impl ComparisonBlock {
    /// Aggregates raw and coupled scores of one setting.
    pub fn from_evaluated(setting: &str, evaluated: &[Evaluated]) -> Result<Self> {
        let regressed: Vec<ScoreReport> = evaluated.iter().map(|e| e.regressed.clone()).collect();
        let coupled: Vec<ScoreReport> = evaluated.iter().map(|e| e.coupled.clone()).collect();
        Ok(Self { setting: setting.to_string(), regressed: aggregate(setting, &regressed)?, post_processed: aggregate(setting, &coupled)? })
    }
}

fn block(setting: &str, evaluated: &[Evaluated]) -> Result<ComparisonBlock> {
    ComparisonBlock::from_evaluated(setting, evaluated)
}

fn fold_dir(out: Option<&Path>, parts: &[String]) -> Option<PathBuf> {
    out.map(|d| parts.iter().fold(d.to_path_buf(), |p, s| p.join(s)))
}

/// Trains every representation on every fold and compares regressed and
/// post-processed errors.
pub fn run_ablation(
    cfg: &RunConfig,
    samples: &[Sample],
    reprs: &[RepresentationKind],
    folds: &[usize],
    workers: usize,
    out: Option<&Path>,
) -> Result<ComparisonReport> {
    let mut blocks = Vec::new();
    for &repr in reprs {
        let model_cfg = ModelConfig { repr, ..cfg.model_config(input_dims(samples)?) };
        let mut evaluated = Vec::new();
        for &fold in folds {
            let dir = fold_dir(out, &[repr.name().to_string(), format!("fold{fold}")]);
            let opts = train_options(cfg, workers, dir);
            evaluated.extend(train_and_evaluate(&model_cfg, samples, fold, &opts)?.evaluated);
        }
        blocks.push(block(repr.label(), &evaluated)?);
    }
    Ok(ComparisonReport { experiment: "rotation representation".into(), variant: cfg.model.variant, folds: folds.to_vec(), blocks })
}

pub const SWEEP_FRACTIONS: [f64; 4] = [1.0, 0.8, 0.6, 0.4];

/// Retrains with reduced training folds; validation and test folds stay fixed.
pub fn run_data_sweep(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    samples: &[Sample],
    fractions: &[f64],
    folds: &[usize],
    workers: usize,
    out: Option<&Path>,
) -> Result<ComparisonReport> {
    let model_cfg = cfg.model_config(input_dims(samples)?);
    let mut blocks = Vec::new();
    for &fraction in fractions {
        let mut evaluated = Vec::new();
        for &fold in folds {
            let reduced = reduce_training_set(manifest, fold, fraction, derive_seed(cfg.seed, &[0x5EE9, fold as u64]))?;
            let keep: std::collections::HashSet<&str> = reduced.entries.iter().map(|e| e.id.as_str()).collect();
            let subset: Vec<Sample> =
                manifest.entries.iter().zip(samples).filter(|(e, _)| keep.contains(e.id.as_str())).map(|(_, s)| s.clone()).collect();
            let dir = fold_dir(out, &[format!("fraction{:.0}", fraction * 100.0), format!("fold{fold}")]);
            let opts = train_options(cfg, workers, dir);
            evaluated.extend(train_and_evaluate(&model_cfg, &subset, fold, &opts)?.evaluated);
        }
        blocks.push(block(&format!("{:.0}%", fraction * 100.0), &evaluated)?);
    }
    Ok(ComparisonReport { experiment: "training set size".into(), variant: cfg.model.variant, folds: folds.to_vec(), blocks })
}

/// Class provision levels: the true one-hot vector, then constant 0, 0.5, 1.
pub const CLASS_LEVELS: [(&str, Option<f64>); 4] = [("true label", None), ("0.0", Some(0.0)), ("0.5", Some(0.5)), ("1.0", Some(1.0))];

/// Evaluates a `with_class` model with the class vector overridden.
pub fn run_class_corruption(state: &ModelState<f32>, test_set: &[Sample], cfg: &RunConfig, fold: usize) -> Result<ComparisonReport> {
    if state.config().variant != Variant::WithClass {
        return Err(Error::VariantMismatch(format!(
            "class corruption needs a with_class model, checkpoint is {}",
            state.config().variant
        )));
    }
    let mut blocks = Vec::new();
    for (label, level) in CLASS_LEVELS {
        let class = level.map_or(ClassInput::OneHot, ClassInput::Constant);
        let evaluated = evaluate_model(state, test_set, &cfg.intensity, class)?;
        blocks.push(block(label, &evaluated)?);
    }
    Ok(ComparisonReport { experiment: "class information".into(), variant: Variant::WithClass, folds: vec![fold], blocks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub hyper: Hyperparams,
    pub val_score: f64,
}

/// Random search on one fold; trials sorted by validation score.
pub fn hparam_search(cfg: &RunConfig, samples: &[Sample], fold: usize, trials: usize, workers: usize) -> Result<Vec<Trial>> {
    let model_cfg = cfg.model_config(input_dims(samples)?);
    let (train_set, val_set, _) = split(samples, fold)?;
    if val_set.is_empty() {
        return Err(Error::Empty(format!("validation split of fold {fold}")));
    }
    let mut rng = rng_for(cfg.seed, &[0x4EA6]);
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let hyper = sample_hyperparams(&mut rng, cfg.train.epochs);
        let opts = TrainOptions { hyper, seed: derive_seed(cfg.seed, &[0x74, t as u64]), ..train_options(cfg, workers, None) };
        let score = match train(&model_cfg, &train_set, &val_set, &opts) {
            Ok(o) => o.history.iter().filter_map(|h| h.val_score).fold(f64::INFINITY, f64::min),
            Err(Error::Numerical(msg)) => {
                log::warn!("trial {t} diverged: {msg}");
                f64::INFINITY
            }
            Err(e) => return Err(e),
        };
        log::info!("trial {t}: {hyper:?} -> {score:.3}");
        out.push(Trial { hyper, val_score: score });
    }
    out.sort_by(|a, b| a.val_score.total_cmp(&b.val_score));
    Ok(out)
}

/// Common volume dimensions of a dataset.
pub fn input_dims(samples: &[Sample]) -> Result<[usize; 3]> {
    let first = samples.first().ok_or_else(|| Error::Empty("dataset".into()))?;
    let dims = first.volume.meta().dims;
    if samples.iter().any(|s| s.volume.meta().dims != dims) {
        return Err(Error::ShapeMismatch("volumes in the dataset differ in size".into()));
    }
    Ok(dims)
}
