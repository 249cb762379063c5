//! Subcommands and their exit-code contract.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use ftkit_core::checkpoint::{self, Meta};
use ftkit_core::data::{read_manifest, read_ppm, split_indices, write_manifest, Dataset, SplitSpec};
use ftkit_core::error::Error;
use ftkit_core::models::BuiltModel;
use ftkit_core::nn::Mode;
use ftkit_core::tensor::Tensor;

use crate::config::{Seeds, TrainerConfig};
use crate::trainer::{self, RunOptions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Debug)]
pub enum Failure {
    /// Bad config, dataset, checkpoint or arguments.
    Usage(String),
    /// Non-finite loss or gradient during training.
    Diverged(String),
    Internal(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Diverged(_) => EXIT_DIVERGED,
            Failure::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Diverged(m) => write!(f, "diverged: {m}"),
            Failure::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Errors raised after inputs were validated.
fn during_run(e: Error) -> Failure {
    match e {
        Error::NonFinite(_) => Failure::Diverged(e.to_string()),
        other => Failure::Internal(other.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "ftkit", version, about = "Train, evaluate and apply transfer-learning image classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split, build, train and write history, confusion, manifests and best.ftk1.
    Train(TrainArgs),
    /// Accuracy and confusion of a checkpoint over a manifest's samples.
    Evaluate(EvaluateArgs),
    /// Predicted class and log-probability for each image.
    Predict(PredictArgs),
    /// Write stratified train/val manifests.
    Split(SplitArgs),
    /// Write frozen-trunk features and labels to an FTK1 file.
    ExtractFeatures(ExtractArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset root; overrides data_root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; overrides output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sets every seed (split, init, shuffle, augment, dropout).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Drop the stochastic ops, keeping resize and normalize.
    #[arg(long)]
    pub no_augment: bool,
    /// Record zero wall time so reruns are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Confusion CSV destination.
    #[arg(long, default_value = "confusion.csv")]
    pub out: PathBuf,
    /// Evaluate even when manifest and checkpoint digests disagree.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.75)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Restrict to the samples listed in a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Split(a) => split(a),
        Command::ExtractFeatures(a) => extract(a),
    }
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = TrainerConfig::load(&a.config).map_err(usage)?;
    if let Some(d) = a.data {
        cfg.data_root = Some(d);
    }
    if let Some(o) = a.out {
        cfg.output_dir = Some(o);
    }
    if let Some(s) = a.seed {
        cfg.seeds = Seeds::all(s);
        cfg.split.seed = s;
    }
    if a.no_augment {
        cfg.augment = false;
    }
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| Failure::Usage("no output_dir in config and no --out given".into()))?;
    let prep = trainer::prepare(&cfg).map_err(usage)?;
    let outcome = trainer::run(prep, &out, RunOptions { no_timing: a.no_timing }).map_err(during_run)?;
    println!("{}", outcome.history.summary_line());
    Ok(())
}

fn meta_classes(meta: &Meta, path: &Path) -> Result<Vec<String>, Failure> {
    meta.get("classes")
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| Failure::Usage(format!("{}: checkpoint meta has no class list", path.display())))
}

/// Builds the configured architecture and loads a run's checkpoint into it.
fn load_model(cfg: &TrainerConfig, ckpt: &Path) -> Result<(BuiltModel<f32>, Meta, Vec<String>), Failure> {
    let header = checkpoint::read_header(ckpt).map_err(usage)?;
    let classes = meta_classes(&header.meta, ckpt)?;
    if let Some(arch) = header.meta.get("arch") {
        if arch != cfg.model.arch.name() {
            return Err(Failure::Usage(format!(
                "{}: checkpoint arch {arch} does not match config arch {}",
                ckpt.display(),
                cfg.model.arch.name()
            )));
        }
    }
    let mut mc = cfg.model.clone();
    mc.num_classes = classes.len();
    let mut model = BuiltModel::<f32>::build(&mc, cfg.seeds.init).map_err(usage)?;
    let loaded = checkpoint::load_checkpoint(ckpt, Some(&model.params)).map_err(usage)?;
    model.params = loaded.tree;
    Ok((model, header.meta, classes))
}

fn data_root(arg: Option<PathBuf>, cfg: &TrainerConfig) -> Result<PathBuf, Failure> {
    arg.or_else(|| cfg.data_root.clone())
        .ok_or_else(|| Failure::Usage("no data_root in config and no --data given".into()))
}

fn check_classes(ds: &Dataset, classes: &[String]) -> Result<(), Failure> {
    if ds.classes() != classes {
        return Err(Failure::Usage(format!(
            "dataset classes {:?} differ from checkpoint classes {classes:?}",
            ds.classes()
        )));
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let cfg = TrainerConfig::load(&a.config).map_err(usage)?;
    let manifest = read_manifest(&a.manifest).map_err(usage)?;
    let (mut model, meta, classes) = load_model(&cfg, &a.checkpoint)?;
    match (manifest.digest.as_deref(), meta.get("config_digest")) {
        (Some(m), Some(c)) if m != c => {
            if a.force {
                log::warn!("manifest digest {m} differs from checkpoint digest {c}; continuing (--force)");
            } else {
                return Err(Failure::Usage(format!(
                    "manifest digest {m} differs from checkpoint digest {c} (use --force to override)"
                )));
            }
        }
        _ => {}
    }
    let root = data_root(a.data, &cfg)?;
    let ds = Dataset::load_subset(&root, &manifest.paths).map_err(usage)?;
    check_classes(&ds, &classes)?;
    let res = trainer::evaluate(&mut model, &ds, cfg.batch_size, &cfg.eval_pipeline()).map_err(during_run)?;
    let acc = res.accuracy().map_err(usage)?;
    res.confusion.write_csv(&classes, &a.out).map_err(during_run)?;
    println!("accuracy={acc:.6} samples={} loss={:.6}", ds.len(), res.loss);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), Failure> {
    let cfg = TrainerConfig::load(&a.config).map_err(usage)?;
    let (mut model, _, classes) = load_model(&cfg, &a.checkpoint)?;
    let pipe = cfg.eval_pipeline();
    // decode everything first so a bad file produces no partial output
    let mut inputs = Vec::with_capacity(a.images.len());
    for path in &a.images {
        let img = read_ppm(path).map_err(usage)?;
        let x = pipe.apply(&img.to_tensor(), 0, 0).map_err(usage)?;
        inputs.push(x);
    }
    for (path, x) in a.images.iter().zip(inputs) {
        let shape: Vec<usize> = std::iter::once(1).chain(x.shape().iter().copied()).collect();
        let x = x.reshape(shape).map_err(during_run)?;
        let lp: Tensor<f32> = model.forward(&x, Mode::Eval, 0).map_err(usage)?;
        let p = lp.argmax_rows()[0];
        println!("{}\t{}\t{:.6}", path.display(), classes[p], lp.data()[p]);
    }
    Ok(())
}

fn split(a: SplitArgs) -> Result<(), Failure> {
    let spec = SplitSpec {
        train_fraction: a.fraction,
        seed: a.seed,
        ..SplitSpec::default()
    };
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Failure::Usage(format!("--fraction must be in (0, 1), got {}", a.fraction)));
    }
    let ds = Dataset::load(&a.data).map_err(usage)?;
    let (train, val) = split_indices(&ds, &spec).map_err(usage)?;
    let digest = {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(&spec).expect("split spec serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    std::fs::create_dir_all(&a.out).map_err(|e| during_run(Error::io(&a.out, e)))?;
    let paths = |idx: &[usize]| idx.iter().map(|&i| ds.items()[i].path.clone()).collect::<Vec<_>>();
    write_manifest(&a.out.join(trainer::TRAIN_MANIFEST), &paths(&train), Some(&digest)).map_err(during_run)?;
    write_manifest(&a.out.join(trainer::VAL_MANIFEST), &paths(&val), Some(&digest)).map_err(during_run)?;
    println!("train={} val={}", train.len(), val.len());
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<(), Failure> {
    let cfg = TrainerConfig::load(&a.config).map_err(usage)?;
    let (mut model, meta, classes) = load_model(&cfg, &a.checkpoint)?;
    let root = data_root(a.data, &cfg)?;
    let ds = match &a.manifest {
        Some(m) => {
            let manifest = read_manifest(m).map_err(usage)?;
            Dataset::load_subset(&root, &manifest.paths).map_err(usage)?
        }
        None => Dataset::load(&root).map_err(usage)?,
    };
    check_classes(&ds, &classes)?;
    model.freeze_backbone();
    let feats = trainer::extract_features(&mut model, &ds, cfg.batch_size, &cfg.eval_pipeline()).map_err(during_run)?;
    let f = model.feature_dim();
    let rows: Vec<Tensor<f32>> = feats
        .data()
        .chunks(f)
        .map(|r| Tensor::new([f], r.to_vec()))
        .collect::<Result<_, _>>()
        .map_err(during_run)?;
    let names: Vec<String> = (0..rows.len()).map(|i| format!("feat.{i:06}")).collect();
    let labels = Tensor::new(
        [ds.len()],
        ds.items().iter().map(|i| i.label as f32).collect(),
    )
    .map_err(during_run)?;
    let mut entries: Vec<(&str, &Tensor<f32>)> = names.iter().map(String::as_str).zip(&rows).collect();
    entries.push(("label", &labels));
    let mut out_meta = Meta::new();
    for key in ["arch", "config_digest", "classes"] {
        if let Some(v) = meta.get(key) {
            out_meta.insert(key.into(), v.clone());
        }
    }
    out_meta.insert("feature_dim".into(), f.to_string());
    out_meta.insert("paths".into(), serde_json::to_string(&ds.paths()).expect("strings serialize"));
    checkpoint::write_tensors(&a.out, &entries, &out_meta).map_err(during_run)?;
    println!("samples={} feature_dim={f}", ds.len());
    Ok(())
}
