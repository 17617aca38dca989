//! Mini-batch SGD with momentum, step learning-rate decay and class-balanced
//! oversampling.
//!
//! Update rule (classic momentum): `v <- mu v - lr g`, `w <- w + v`. The
//! learning rate in epoch `e` (1-based) is `lr * lr_decay^floor((e - 1) / decay_step)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_sample, normalize_volume, IntensityParams};
use crate::config::{AugmentConfig, IntensityConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, median_score};
use crate::geometry::BodyRegion;
use crate::model::{checkpoint, planes_to_target, ClassInput, Grads, Mode, ModelConfig, ModelState, Real};
use crate::phantom::Sample;
use crate::rng::{derive_seed, rng_for};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between decays.
    pub decay_step: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self { lr: 0.00164, lr_decay: 0.27291, decay_step: 75, momentum: 0.957437, batch_size: 9, epochs: 50 }
    }
}

impl Hyperparams {
    /// `lr = 0` is allowed here (it freezes the weights); run configs
    /// require a positive rate.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0)
            || self.decay_step == 0
            || !(0.0..1.0).contains(&self.momentum)
            || self.batch_size == 0
            || self.epochs == 0
        {
            return Err(Error::Config(format!("invalid hyperparameters: {self:?}")));
        }
        Ok(())
    }

    /// Learning rate used during 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = (epoch.max(1) - 1) / self.decay_step;
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

/// Draws hyperparameters from the random-search space: log-uniform learning
/// rate in [1e-4, 1e-2], decay in [0.2, 0.9] and momentum in [0.5, 0.99];
/// uniform integer decay step in [20, 80] and batch size in [5, 12].
pub fn sample_hyperparams(rng: &mut impl Rng, epochs: usize) -> Hyperparams {
    let mut log_u = |lo: f64, hi: f64| (rng.gen_range(lo.ln()..=hi.ln())).exp();
    let lr = log_u(1e-4, 1e-2);
    let lr_decay = log_u(0.2, 0.9);
    let momentum = log_u(0.5, 0.99);
    Hyperparams { lr, lr_decay, momentum, decay_step: rng.gen_range(20..=80), batch_size: rng.gen_range(5..=12), epochs }
}

pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("prediction has {} values, target {}", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Gradient of [`mse_loss`] with respect to the predictions.
pub fn mse_grad<T: Real>(pred: &[T], target: &[f64]) -> Vec<T> {
    let k = 2.0 / pred.len() as f64;
    pred.iter().zip(target).map(|(&p, &t)| T::of(k * (p.f64() - t))).collect()
}

/// One momentum step on a flat parameter vector.
pub fn momentum_step<T: Real>(w: &mut [T], v: &mut [T], g: &[T], lr: T, mu: T) {
    for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v - lr * g;
        *w += *v;
    }
}

#[derive(Debug, Clone)]
pub struct Sgd<T> {
    velocity: Grads<T>,
    momentum: f64,
}

impl<T: Real> Sgd<T> {
    pub fn new(state: &ModelState<T>, momentum: f64) -> Self {
        Self { velocity: state.zero_grads(), momentum }
    }

    pub fn step(&mut self, state: &mut ModelState<T>, grads: &Grads<T>, lr: f64) {
        let (lr, mu) = (T::of(lr), T::of(self.momentum));
        for ((p, v), g) in state.params_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            momentum_step(&mut p.data, v, g, lr, mu);
        }
    }
}

/// Sample indices for one epoch. Each region gets an equal share of the
/// `epoch_len` draws (the remainder goes to randomly chosen regions); within
/// a region volumes are drawn uniformly with replacement. A volume's draw
/// probability is therefore proportional to one over its region's size.
pub fn oversample_schedule(regions: &[BodyRegion], epoch_len: usize, seed: u64, epoch: usize) -> Result<Vec<usize>> {
    let mut by_region: [Vec<usize>; BodyRegion::COUNT] = Default::default();
    for (i, r) in regions.iter().enumerate() {
        by_region[r.index()].push(i);
    }
    if let Some(r) = BodyRegion::ALL.iter().find(|r| by_region[r.index()].is_empty()) {
        return Err(Error::Empty(format!("training set has no {r} volumes")));
    }
    let mut rng = rng_for(seed, &[0x0E5, epoch as u64]);
    let k = BodyRegion::COUNT;
    let mut quota = [epoch_len / k; BodyRegion::COUNT];
    let mut extra: Vec<usize> = (0..k).collect();
    extra.shuffle(&mut rng);
    for &r in &extra[..epoch_len % k] {
        quota[r] += 1;
    }
    let mut out = Vec::with_capacity(epoch_len);
    for (r, members) in by_region.iter().enumerate() {
        for _ in 0..quota[r] {
            out.push(members[rng.gen_range(0..members.len())]);
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub hyper: Hyperparams,
    pub augment: bool,
    pub aug: AugmentConfig,
    pub intensity: IntensityConfig,
    pub seed: u64,
    /// Augmentation threads; 0 prepares batches on the training thread.
    pub workers: usize,
    /// Draws per epoch; defaults to the training-set size.
    pub epoch_len: Option<usize>,
    /// Receives `best.ckpt`, `final.ckpt` and `history.json`.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            hyper: Hyperparams::default(),
            augment: true,
            aug: AugmentConfig::default(),
            intensity: IntensityConfig::default(),
            seed: 0,
            workers: 0,
            epoch_len: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Median validation score, when a validation set is given.
    pub val_score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_state: ModelState<f32>,
    /// Lowest validation score; the final state without a validation set.
    pub best_state: ModelState<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

struct Batch {
    input: Vec<f32>,
    regions: Vec<BodyRegion>,
    targets: Vec<f64>,
}

fn build_batch(samples: &[Sample], idx: &[usize], cfg: &ModelConfig, opts: &TrainOptions, epoch: usize, offset: usize) -> Result<Batch> {
    let mut input = Vec::with_capacity(idx.len() * cfg.input_len());
    let mut regions = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len() * cfg.out_size());
    let nominal = IntensityParams::nominal(&opts.intensity)?;
    for (k, &i) in idx.iter().enumerate() {
        let s = &samples[i];
        let seed = derive_seed(opts.seed, &[0xBA7C, epoch as u64, (offset + k) as u64]);
        let (x, planes) = if opts.augment {
            let a = augment_sample(&s.volume, &s.planes, seed, &opts.aug, &opts.intensity)?;
            (a.input, a.planes)
        } else {
            (normalize_volume(&s.volume, &nominal), s.planes)
        };
        input.extend_from_slice(&x);
        regions.push(s.region);
        targets.extend(planes_to_target(&planes, cfg.repr, s.volume.meta())?);
    }
    Ok(Batch { input, regions, targets })
}

/// Prepares the epoch's batches, on worker threads when requested, and hands
/// them to `consume` strictly in order. Batch contents depend only on the
/// seed, epoch and position, never on the number of workers.
fn for_each_batch(
    samples: &[Sample],
    chunks: &[&[usize]],
    offsets: &[usize],
    cfg: &ModelConfig,
    opts: &TrainOptions,
    epoch: usize,
    mut consume: impl FnMut(usize, Batch) -> Result<()>,
) -> Result<()> {
    if opts.workers == 0 {
        for (b, chunk) in chunks.iter().enumerate() {
            consume(b, build_batch(samples, chunk, cfg, opts, epoch, offsets[b])?)?;
        }
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<(usize, Result<Batch>)>(2 * opts.workers);
        for _ in 0..opts.workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let b = next.fetch_add(1, Ordering::SeqCst);
                if b >= chunks.len() {
                    break;
                }
                if tx.send((b, build_batch(samples, chunks[b], cfg, opts, epoch, offsets[b]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut expected = 0;
        let mut result = Ok(());
        for (b, batch) in rx {
            pending.insert(b, batch);
            while let Some(batch) = pending.remove(&expected) {
                if result.is_ok() {
                    result = batch.and_then(|batch| consume(expected, batch));
                }
                if result.is_err() {
                    // stop handing out work; workers drain and exit
                    next.store(chunks.len(), Ordering::SeqCst);
                }
                expected += 1;
            }
        }
        result
    })
}

fn write_history(dir: &Path, history: &[EpochRecord]) -> Result<()> {
    let path = dir.join("history.json");
    std::fs::write(&path, serde_json::to_string_pretty(history).expect("history serializes")).map_err(|e| Error::io(&path, e))
}

/// Trains from a fresh He initialization derived from `opts.seed`.
pub fn train(cfg: &ModelConfig, train_set: &[Sample], val_set: &[Sample], opts: &TrainOptions) -> Result<TrainOutcome> {
    let state = ModelState::<f32>::init(cfg, derive_seed(opts.seed, &[0x1417]))?;
    train_from(state, train_set, val_set, opts)
}

pub fn train_from(
    mut state: ModelState<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    opts.hyper.validate()?;
    opts.aug.validate()?;
    opts.intensity.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let cfg = state.config().clone();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let regions: Vec<BodyRegion> = train_set.iter().map(|s| s.region).collect();
    let epoch_len = opts.epoch_len.unwrap_or(train_set.len());
    let h = opts.hyper;
    let mut sgd = Sgd::new(&state, h.momentum);
    let mut history = Vec::with_capacity(h.epochs);
    let mut best: Option<(f64, usize, ModelState<f32>)> = None;
    for epoch in 1..=h.epochs {
        let lr = h.lr_at(epoch);
        let order = oversample_schedule(&regions, epoch_len, opts.seed, epoch)?;
        let mut chunks: Vec<&[usize]> = order.chunks(h.batch_size).collect();
        // a single-sample batch has no batch statistics to normalize with
        if h.batch_size > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
            chunks.pop();
        }
        let offsets: Vec<usize> = chunks.iter().scan(0, |o, c| {
            let start = *o;
            *o += c.len();
            Some(start)
        }).collect();
        let mut loss_sum = 0.0;
        let n_batches = chunks.len();
        for_each_batch(train_set, &chunks, &offsets, &cfg, opts, epoch, |b, batch| {
            let fwd = state.forward(&batch.input, &batch.regions, ClassInput::OneHot, Mode::Train)?;
            let pred: Vec<f64> = fwd.outputs.iter().map(|&v| v as f64).collect();
            let loss = mse_loss(&pred, &batch.targets)?;
            if !loss.is_finite() {
                let mut msg = format!("non-finite loss in epoch {epoch}, batch {b}");
                if let Some(dir) = &opts.out_dir {
                    let snap = dir.join("nan_snapshot.ckpt");
                    checkpoint::save(&state, &snap)?;
                    msg.push_str(&format!("; state saved to {}", snap.display()));
                }
                return Err(Error::Numerical(msg));
            }
            let grads = state.backward(&fwd, &mse_grad(&fwd.outputs, &batch.targets))?;
            sgd.step(&mut state, &grads, lr);
            state.update_running_stats(&fwd);
            loss_sum += loss;
            Ok(())
        })?;
        if !state.is_finite() {
            return Err(Error::Numerical(format!("parameters became non-finite in epoch {epoch}")));
        }
        let val_score = if val_set.is_empty() {
            None
        } else {
            Some(median_score(&evaluate_model(&state, val_set, &opts.intensity, ClassInput::OneHot)?))
        };
        let rec = EpochRecord { epoch, lr, loss: loss_sum / n_batches.max(1) as f64, val_score };
        log::info!("epoch {epoch}: lr {lr:.3e} loss {:.5} val {:?}", rec.loss, rec.val_score);
        history.push(rec);
        if let Some(v) = val_score {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, state.clone()));
                if let Some(dir) = &opts.out_dir {
                    checkpoint::save(&state, &dir.join("best.ckpt"))?;
                }
            }
        }
    }
    let (best_epoch, best_state) = match best {
        Some((_, e, s)) => (e, s),
        None => (h.epochs, state.clone()),
    };
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&state, &dir.join("final.ckpt"))?;
        if val_set.is_empty() {
            checkpoint::save(&state, &dir.join("best.ckpt"))?;
        }
        write_history(dir, &history)?;
    }
    Ok(TrainOutcome { final_state: state, best_state, best_epoch, history })
}
