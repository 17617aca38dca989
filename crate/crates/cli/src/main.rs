//! `mpr`: data generation, training, evaluation and the study experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpr_core::config::RunConfig;
use mpr_core::evaluation::{evaluate_model, median_score};
use mpr_core::model::{checkpoint, planes_to_target, ClassInput};
use mpr_core::phantom::{write_dataset, DatasetManifest, N_FOLDS};
use mpr_core::study::{self, ComparisonBlock, ComparisonReport, SWEEP_FRACTIONS};
use mpr_core::{Error, RepresentationKind, Result, Variant};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "mpr", version, about = "Standard-plane regression on synthetic phantom volumes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Run fold: test fold K, validation fold K+1 mod 5
    #[arg(long, global = true, value_name = "K")]
    fold: Option<usize>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Rotation representation: euler, quat, 6dxy or 6dxz
    #[arg(long, global = true)]
    repr: Option<RepresentationKind>,
    /// Fraction of the training folds to keep
    #[arg(long, global = true, value_name = "F")]
    fraction: Option<f64>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Augmentation worker threads (0 augments on the training thread)
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantom volumes and a manifest into --out
    GenData,
    /// Train one fold, then evaluate the selected checkpoint on its test fold
    Train,
    /// Evaluate a checkpoint on the test fold
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Write the regression targets of every manifest entry in --repr
    Convert,
    /// Compare rotation representations with and without post-processing
    Ablate,
    /// Retrain with reduced training folds
    SweepData,
    /// Evaluate a with_class checkpoint with overridden class vectors
    CorruptClass {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Random search over learning rate, decay, momentum and batch size
    HparamSearch {
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(fold) = c.fold {
        cfg.fold = fold;
    }
    if let Some(v) = c.variant {
        cfg.model.variant = v;
    }
    if let Some(r) = c.repr {
        cfg.model.repr = r;
    }
    if let Some(f) = c.fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(usage(format!("--fraction must lie in (0, 1], got {f}")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(c: &Common) -> Result<&Path> {
    c.out.as_deref().ok_or_else(|| usage("this command needs --out DIR"))
}

fn folds(c: &Common, cfg: &RunConfig) -> Vec<usize> {
    match c.fold {
        Some(_) => vec![cfg.fold],
        None => (0..N_FOLDS).collect(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(report: &ComparisonReport, out: Option<&Path>, stem: &str) -> Result<()> {
    print!("{}", report.table());
    if let Some(dir) = out {
        report.write(dir, stem)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    // every flag is checked before anything is read or written
    let cfg = resolve_config(c)?;
    let needs_out = matches!(cli.command, Command::GenData | Command::Convert);
    if needs_out {
        require_out(c)?;
    }
    if let Command::HparamSearch { trials: 0 } = cli.command {
        return Err(usage("--trials must be positive"));
    }
    let out = c.out.as_deref();

    match &cli.command {
        Command::GenData => {
            let m = study::manifest_from_config(&cfg)?;
            let path = write_dataset(&m, require_out(c)?)?;
            println!("wrote {} volumes, manifest {}", m.entries.len(), path.display());
            for (k, counts) in m.fold_region_counts().iter().enumerate() {
                println!("fold {k}: {counts:?}");
            }
        }
        Command::Train => {
            let (_, samples) = study::load_dataset(&cfg)?;
            let model_cfg = cfg.model_config(study::input_dims(&samples)?);
            let opts = study::train_options(&cfg, c.workers, out.map(Path::to_path_buf));
            let result = study::train_and_evaluate(&model_cfg, &samples, cfg.fold, &opts)?;
            log::info!("best epoch {}, test median score {:.3}", result.outcome.best_epoch, median_score(&result.evaluated));
            let report = ComparisonReport {
                experiment: "test fold".into(),
                variant: cfg.model.variant,
                folds: vec![cfg.fold],
                blocks: vec![ComparisonBlock::from_evaluated(cfg.model.repr.label(), &result.evaluated)?],
            };
            emit(&report, out, "report")?;
        }
        Command::Evaluate { checkpoint: path } => {
            let state = checkpoint::load(path)?;
            if let Some(v) = c.variant.filter(|&v| v != state.config().variant) {
                return Err(Error::VariantMismatch(format!("--variant {v} but checkpoint is {}", state.config().variant)));
            }
            let (_, samples) = study::load_dataset(&cfg)?;
            let (_, _, test_set) = study::split(&samples, cfg.fold)?;
            let evaluated = evaluate_model(&state, &test_set, &cfg.intensity, ClassInput::OneHot)?;
            let report = ComparisonReport {
                experiment: "test fold".into(),
                variant: state.config().variant,
                folds: vec![cfg.fold],
                blocks: vec![ComparisonBlock::from_evaluated(state.config().repr.label(), &evaluated)?],
            };
            emit(&report, out, "evaluation")?;
        }
        Command::Convert => {
            let m = match &cfg.manifest {
                Some(path) => DatasetManifest::load(path)?,
                None => study::manifest_from_config(&cfg)?,
            };
            let meta = m.meta()?;
            let repr = cfg.model.repr;
            let mut rows = Vec::with_capacity(m.entries.len());
            for e in &m.entries {
                let target = planes_to_target(&e.ground_truth()?, repr, &meta)?;
                rows.push(json!({ "id": e.id, "region": e.region, "fold": e.fold, "target": target }));
            }
            let path = require_out(c)?.join(format!("targets_{}.json", repr.name()));
            let doc = json!({ "repr": repr.name(), "entries": rows });
            write_text(&path, &serde_json::to_string_pretty(&doc).expect("targets serialize"))?;
            println!("wrote {} targets to {}", m.entries.len(), path.display());
        }
        Command::Ablate => {
            let (_, samples) = study::load_dataset(&cfg)?;
            let reprs = match c.repr {
                Some(r) => vec![r],
                None => RepresentationKind::ALL.to_vec(),
            };
            let report = study::run_ablation(&cfg, &samples, &reprs, &folds(c, &cfg), c.workers, out)?;
            emit(&report, out, "ablation")?;
        }
        Command::SweepData => {
            let (manifest, samples) = study::load_dataset(&cfg)?;
            let fractions = match c.fraction {
                Some(f) => vec![f],
                None => SWEEP_FRACTIONS.to_vec(),
            };
            let report = study::run_data_sweep(&cfg, &manifest, &samples, &fractions, &folds(c, &cfg), c.workers, out)?;
            emit(&report, out, "data_sweep")?;
        }
        Command::CorruptClass { checkpoint: path } => {
            let state = checkpoint::load(path)?;
            let (_, samples) = study::load_dataset(&cfg)?;
            let (_, _, test_set) = study::split(&samples, cfg.fold)?;
            let report = study::run_class_corruption(&state, &test_set, &cfg, cfg.fold)?;
            emit(&report, out, "class_corruption")?;
        }
        Command::HparamSearch { trials } => {
            let (_, samples) = study::load_dataset(&cfg)?;
            let results = study::hparam_search(&cfg, &samples, cfg.fold, *trials, c.workers)?;
            for (i, t) in results.iter().enumerate() {
                println!("{i:>3}  score {:>8.3}  {:?}", t.val_score, t.hyper);
            }
            if let Some(dir) = out {
                let text = serde_json::to_string_pretty(&results).expect("trials serialize");
                write_text(&dir.join("hparam_search.json"), &text)?;
            }
        }
    }
    Ok(())
}
