//! Epoch loop: train pass with clip + Adam, validation pass, plateau
//! scheduling, early stopping and best-weight restoration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ftkit_core::augment::{batches, AugmentPipeline};
use ftkit_core::checkpoint::{self, Meta};
use ftkit_core::data::{split_indices, write_manifest, Dataset};
use ftkit_core::error::{Error, Result};
use ftkit_core::metrics::{ConfusionMatrix, EpochRecord, History, StopReason};
use ftkit_core::models::{BuiltModel, BACKBONE_PREFIX};
use ftkit_core::nn::Mode;
use ftkit_core::optim::{clip_tree, Adam, AdamConfig, ClipConfig, EarlyStopper, PlateauScheduler, StopDecision};
use ftkit_core::rng::{mix_seed, SplitMix64};
use ftkit_core::tensor::Tensor;

use crate::config::{Metric, TrainerConfig};

/// Mean loss and accuracy over one pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PassStats {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
}

impl PassStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<usize>,
    /// Log-probability of each predicted class.
    pub scores: Vec<f64>,
}

impl EvalResult {
    pub fn accuracy(&self) -> Result<f64> {
        self.confusion.accuracy()
    }
}

fn nll_sum(logprobs: &Tensor<f32>, labels: &[usize]) -> f64 {
    let k = logprobs.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -(logprobs.data()[i * k + y] as f64))
        .sum()
}

fn correct(logprobs: &Tensor<f32>, labels: &[usize]) -> usize {
    logprobs.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count()
}

fn check_finite(loss: f64, epoch: u64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("training loss {loss} at epoch {} step {step}", epoch + 1)))
    }
}

/// One optimizer step per batch; `epoch` is zero-based and seeds shuffling,
/// augmentation and dropout.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut BuiltModel<f32>,
    adam: &mut Adam<f32>,
    clip: ClipConfig,
    ds: &Dataset,
    batch_size: usize,
    shuffle_seed: u64,
    dropout_seed: u64,
    epoch: u64,
    pipeline: &AugmentPipeline,
) -> Result<PassStats> {
    let mut stats = PassStats {
        loss: 0.0,
        correct: 0,
        total: 0,
    };
    for (step, batch) in batches(ds, batch_size, Some(shuffle_seed), epoch, Some(pipeline))?.enumerate() {
        let batch = batch?;
        model.params.zero_grads();
        let out = model.loss_and_grads(
            &batch.images,
            &batch.labels,
            Mode::Train,
            mix_seed(dropout_seed, epoch, step as u64),
        )?;
        check_finite(out.loss, epoch, step)?;
        clip_tree(&mut model.params, clip)?;
        adam.step(&mut model.params)?;
        let n = batch.labels.len();
        stats.loss += out.loss * n as f64;
        stats.correct += correct(&out.logprobs, &batch.labels);
        stats.total += n;
    }
    stats.loss /= stats.total.max(1) as f64;
    Ok(stats)
}

/// Head-only epoch on cached `[N, F]` features (frozen trunk).
#[allow(clippy::too_many_arguments)]
pub fn train_head_epoch(
    model: &mut BuiltModel<f32>,
    adam: &mut Adam<f32>,
    clip: ClipConfig,
    features: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
    shuffle_seed: u64,
    dropout_seed: u64,
    epoch: u64,
) -> Result<PassStats> {
    let n = labels.len();
    let f = features.shape()[1];
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(mix_seed(shuffle_seed, epoch, 0)).shuffle(&mut order);
    let mut stats = PassStats {
        loss: 0.0,
        correct: 0,
        total: 0,
    };
    for (step, idx) in order.chunks(batch_size).enumerate() {
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(&features.data()[i * f..(i + 1) * f]);
        }
        let x = Tensor::new([idx.len(), f], data)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        model.params.zero_grads();
        let out = model.head_loss_and_grads(&x, &y, Mode::Train, mix_seed(dropout_seed, epoch, step as u64))?;
        check_finite(out.loss, epoch, step)?;
        clip_tree(&mut model.params, clip)?;
        adam.step(&mut model.params)?;
        stats.loss += out.loss * idx.len() as f64;
        stats.correct += correct(&out.logprobs, &y);
        stats.total += idx.len();
    }
    stats.loss /= stats.total.max(1) as f64;
    Ok(stats)
}

fn eval_from_logprobs(acc: &mut EvalResult, lp: &Tensor<f32>, labels: &[usize]) -> Result<()> {
    let preds = lp.argmax_rows();
    let k = lp.shape()[1];
    acc.confusion.update(&preds, labels)?;
    acc.loss += nll_sum(lp, labels);
    for (i, &p) in preds.iter().enumerate() {
        acc.scores.push(lp.data()[i * k + p] as f64);
    }
    acc.predictions.extend(preds);
    Ok(())
}

fn empty_eval(k: usize) -> EvalResult {
    EvalResult {
        loss: 0.0,
        confusion: ConfusionMatrix::new(k),
        predictions: Vec::new(),
        scores: Vec::new(),
    }
}

/// Eval-mode pass in dataset order.
pub fn evaluate(
    model: &mut BuiltModel<f32>,
    ds: &Dataset,
    batch_size: usize,
    pipeline: &AugmentPipeline,
) -> Result<EvalResult> {
    let mut acc = empty_eval(model.num_classes());
    for batch in batches(ds, batch_size, None, 0, Some(pipeline))? {
        let batch = batch?;
        let lp = model.forward(&batch.images, Mode::Eval, 0)?;
        eval_from_logprobs(&mut acc, &lp, &batch.labels)?;
    }
    acc.loss /= ds.len().max(1) as f64;
    Ok(acc)
}

/// Eval-mode head pass over cached features.
pub fn evaluate_head(
    model: &mut BuiltModel<f32>,
    features: &Tensor<f32>,
    labels: &[usize],
    batch_size: usize,
) -> Result<EvalResult> {
    let f = features.shape()[1];
    let mut acc = empty_eval(model.num_classes());
    for (c, y) in labels.chunks(batch_size).enumerate() {
        let start = c * batch_size * f;
        let x = Tensor::new([y.len(), f], features.data()[start..start + y.len() * f].to_vec())?;
        let lp = model.head_forward(&x, Mode::Eval, 0)?;
        eval_from_logprobs(&mut acc, &lp, y)?;
    }
    acc.loss /= labels.len().max(1) as f64;
    Ok(acc)
}

/// `[N, F]` frozen-trunk features of a dataset, in dataset order.
pub fn extract_features(
    model: &mut BuiltModel<f32>,
    ds: &Dataset,
    batch_size: usize,
    pipeline: &AugmentPipeline,
) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    for batch in batches(ds, batch_size, None, 0, Some(pipeline))? {
        let batch = batch?;
        data.extend_from_slice(model.feature_extract(&batch.images)?.data());
    }
    Tensor::new([ds.len(), model.feature_dim()], data)
}

/// Inputs resolved and validated before anything is written.
pub struct Prepared {
    pub config: TrainerConfig,
    pub digest: String,
    pub dataset: Dataset,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub model: BuiltModel<f32>,
}

pub fn prepare(cfg: &TrainerConfig) -> Result<Prepared> {
    cfg.validate()?;
    let root = cfg
        .data_root
        .clone()
        .ok_or_else(|| Error::Config("no data_root in config and no --data given".into()))?;
    let dataset = Dataset::load(&root)?;
    let mut config = cfg.clone();
    if config.model.num_classes != dataset.num_classes() {
        log::info!(
            "num_classes {} -> {} from {}",
            config.model.num_classes,
            dataset.num_classes(),
            root.display()
        );
        config.model.num_classes = dataset.num_classes();
    }
    config.validate()?;
    let (train_idx, val_idx) = split_indices(&dataset, &config.split)?;
    let mut model = BuiltModel::<f32>::build(&config.model, config.seeds.init)?;
    if let Some(path) = &config.init_checkpoint {
        let n = checkpoint::load_prefix(&mut model.params, path, BACKBONE_PREFIX)?;
        log::info!("imported {n} backbone tensors from {}", path.display());
    }
    if config.freeze_backbone {
        let n = model.freeze_backbone();
        log::info!("froze {n} backbone tensors");
    }
    let digest = config.digest();
    Ok(Prepared {
        config,
        digest,
        dataset,
        train_idx,
        val_idx,
        model,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record zero wall time so reruns produce byte-identical histories.
    pub no_timing: bool,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub history: History,
    /// Validation confusion of the restored best weights.
    pub confusion: ConfusionMatrix,
    pub out_dir: PathBuf,
    pub model: BuiltModel<f32>,
}

pub const HISTORY_JSON: &str = "history.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const CONFUSION_CSV: &str = "confusion.csv";
pub const BEST_CHECKPOINT: &str = "best.ftk1";
pub const OPTIMIZER_STATE: &str = "adam.ftk1";
pub const TRAIN_MANIFEST: &str = "train.manifest";
pub const VAL_MANIFEST: &str = "val.manifest";
pub const RESOLVED_CONFIG: &str = "resolved-config.json";
pub const SUMMARY: &str = "summary.txt";

/// Metadata stored in every checkpoint written by a run.
pub fn checkpoint_meta(cfg: &TrainerConfig, digest: &str, classes: &[String]) -> Meta {
    let mut meta = BTreeMap::new();
    meta.insert("arch".into(), cfg.model.arch.name().to_string());
    meta.insert("config_digest".into(), digest.to_string());
    meta.insert("num_classes".into(), cfg.model.num_classes.to_string());
    meta.insert("input_size".into(), cfg.model.input().to_string());
    meta.insert(
        "classes".into(),
        serde_json::to_string(classes).expect("strings serialize"),
    );
    meta
}

fn metric(m: Metric, val_loss: f64, val_acc: f64) -> f64 {
    match m {
        Metric::ValLoss => val_loss,
        Metric::ValAcc => val_acc,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the resolved config with its digest; the file loads back as a config.
pub fn write_resolved_config(cfg: &TrainerConfig, digest: &str, path: &Path) -> Result<()> {
    let mut v = serde_json::to_value(cfg).map_err(|e| Error::Serde(e.to_string()))?;
    v.as_object_mut()
        .expect("config is an object")
        .insert("config_digest".into(), digest.into());
    let text = serde_json::to_string_pretty(&v).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Runs the full epoch loop and writes every artifact into `out_dir`.
pub fn run(prep: Prepared, out_dir: &Path, opts: RunOptions) -> Result<RunOutcome> {
    let Prepared {
        config: cfg,
        digest,
        dataset,
        train_idx,
        val_idx,
        mut model,
    } = prep;
    let train_ds = dataset.subset(&train_idx);
    let val_ds = dataset.subset(&val_idx);

    create_dir(out_dir)?;
    write_resolved_config(&cfg, &digest, &out_dir.join(RESOLVED_CONFIG))?;
    write_manifest(&out_dir.join(TRAIN_MANIFEST), &train_ds.paths(), Some(&digest))?;
    write_manifest(&out_dir.join(VAL_MANIFEST), &val_ds.paths(), Some(&digest))?;

    let train_pipe = cfg.train_pipeline();
    let eval_pipe = cfg.eval_pipeline();
    let clip = ClipConfig {
        max_norm: cfg.clip_max_norm,
    };
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut sched = PlateauScheduler::new(cfg.scheduler.plateau(), cfg.lr)?;
    let mut stopper = EarlyStopper::new(cfg.early_stop.stopper());
    let mut history = History::new(digest.clone());

    // With a frozen trunk and no stochastic ops, trunk features never change.
    let cached = if model.backbone_frozen() && !train_pipe.ops.iter().any(|o| o.is_stochastic()) {
        log::info!("caching frozen-trunk features");
        let tf = extract_features(&mut model, &train_ds, cfg.batch_size, &train_pipe)?;
        let vf = extract_features(&mut model, &val_ds, cfg.batch_size, &eval_pipe)?;
        let labels = |ds: &Dataset| ds.items().iter().map(|i| i.label).collect::<Vec<_>>();
        Some((tf, labels(&train_ds), vf, labels(&val_ds)))
    } else {
        None
    };

    for e in 0..cfg.max_epochs {
        let epoch = e as u64;
        let started = Instant::now();
        let lr = sched.lr();
        adam.set_lr(lr);
        let (train, val) = match &cached {
            Some((tf, tl, vf, vl)) => {
                let t = train_head_epoch(
                    &mut model,
                    &mut adam,
                    clip,
                    tf,
                    tl,
                    cfg.batch_size,
                    cfg.seeds.shuffle,
                    cfg.seeds.dropout,
                    epoch,
                )?;
                (t, evaluate_head(&mut model, vf, vl, cfg.batch_size)?)
            }
            None => {
                let t = train_epoch(
                    &mut model,
                    &mut adam,
                    clip,
                    &train_ds,
                    cfg.batch_size,
                    cfg.seeds.shuffle,
                    cfg.seeds.dropout,
                    epoch,
                    &train_pipe,
                )?;
                (t, evaluate(&mut model, &val_ds, cfg.batch_size, &eval_pipe)?)
            }
        };
        let val_acc = val.accuracy()?;
        if !val.loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {} at epoch {}", val.loss, e + 1)));
        }
        sched.step(metric(cfg.scheduler.monitor, val.loss, val_acc))?;
        let decision = stopper.update(metric(cfg.early_stop.monitor, val.loss, val_acc), &model.params)?;
        let wall = if opts.no_timing {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        history.records.push(EpochRecord {
            epoch: e + 1,
            train_loss: train.loss,
            train_acc: train.accuracy(),
            val_loss: val.loss,
            val_acc,
            lr,
            wall_seconds: wall,
        });
        log::info!(
            "epoch {}/{}: train_loss={:.4} train_acc={:.4} val_loss={:.4} val_acc={:.4} lr={:.1e} ({:.1}s)",
            e + 1,
            cfg.max_epochs,
            train.loss,
            train.accuracy(),
            val.loss,
            val_acc,
            lr,
            wall
        );
        if decision == StopDecision::Stop {
            history.stop_reason = StopReason::EarlyStopped;
            break;
        }
    }

    stopper.restore_best(&mut model.params)?;
    history.best_epoch = stopper.best_epoch().expect("at least one epoch ran");
    let final_eval = match &cached {
        Some((_, _, vf, vl)) => evaluate_head(&mut model, vf, vl, cfg.batch_size)?,
        None => evaluate(&mut model, &val_ds, cfg.batch_size, &eval_pipe)?,
    };

    let meta = {
        let mut m = checkpoint_meta(&cfg, &digest, dataset.classes());
        m.insert("best_epoch".into(), history.best_epoch.to_string());
        m
    };
    checkpoint::save_checkpoint(&model.params, &meta, &out_dir.join(BEST_CHECKPOINT))?;
    checkpoint::save_adam(&adam, &meta, &out_dir.join(OPTIMIZER_STATE))?;
    final_eval
        .confusion
        .write_csv(dataset.classes(), &out_dir.join(CONFUSION_CSV))?;
    history.write_json(&out_dir.join(HISTORY_JSON))?;
    history.write_csv(&out_dir.join(HISTORY_CSV))?;
    history.write_summary(&out_dir.join(SUMMARY))?;

    Ok(RunOutcome {
        history,
        confusion: final_eval.confusion,
        out_dir: out_dir.to_path_buf(),
        model,
    })
}
