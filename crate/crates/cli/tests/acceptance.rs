//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! `cargo test -p ftkit-cli --test acceptance -- <substring>` runs a subset.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ftkit_cli::config::{Seeds, TrainerConfig};
use ftkit_cli::trainer::{self, evaluate, train_epoch, RunOptions};
use ftkit_core::augment::{gaussian_blur, hflip, rot90, vflip, AugmentPipeline};
use ftkit_core::checkpoint::{self, Meta};
use ftkit_core::data::{split_indices, Dataset, Item, RgbImage, SplitSpec};
use ftkit_core::error::Error;
use ftkit_core::metrics::ConfusionMatrix;
use ftkit_core::models::{Arch, BuiltModel, ModelConfig, BACKBONE_PREFIX, HEAD_PREFIX};
use ftkit_core::nn::Mode;
use ftkit_core::optim::{
    clip_global_norm, Adam, AdamConfig, ClipConfig, EarlyStopConfig, EarlyStopper, MonitorMode, PlateauConfig,
    PlateauScheduler, StopDecision,
};
use ftkit_core::params::{Param, ParamTree};
use ftkit_core::rng::SplitMix64;
use ftkit_core::synth::{self, SynthSpec, Variant};
use ftkit_core::tensor::Tensor;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// gradient correctness

fn gradients() -> Outcome {
    let checks = common::check_all_ops(20);
    let mut parts = Vec::new();
    for c in &checks {
        ensure(c.instances >= 20, || format!("{}: only {} instances", c.op, c.instances))?;
        ensure(c.ok(), || format!("{}: max rel err {:.3e} >= {:.0e}", c.op, c.max_err, c.tol))?;
        parts.push(format!("{} {:.1e}", c.op, c.max_err));
    }
    for op in ["conv2d", "linear", "matmul", "relu", "maxpool", "batchnorm", "log_softmax"] {
        ensure(checks.iter().any(|c| c.op.contains(op)), || format!("{op} not checked"))?;
    }
    Ok(parts.join(", "))
}

// clipping contract

fn random_grads(rng: &mut SplitMix64) -> Vec<Tensor<f32>> {
    let count = 1 + rng.below(5) as usize;
    // scales from well below to far above the threshold
    let scale = 10f64.powf(rng.uniform(-3.0, 1.5));
    (0..count)
        .map(|_| {
            let shape: Vec<usize> = (0..1 + rng.below(3)).map(|_| 1 + rng.below(12) as usize).collect();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| (rng.uniform(-1.0, 1.0) * scale) as f32).collect();
            Tensor::new(shape, data).unwrap()
        })
        .collect()
}

fn clipping() -> Outcome {
    let max_norm = 0.1;
    let cfg = ClipConfig { max_norm };
    let mut rng = SplitMix64::new(2024);
    let (mut scaled, mut worst_norm, mut worst_cos) = (0, 0.0f64, 0.0f64);
    for set in 0..1000 {
        let before = random_grads(&mut rng);
        let mut after = before.clone();
        let factor = {
            let mut refs: Vec<&mut Tensor<f32>> = after.iter_mut().collect();
            clip_global_norm(&mut refs, cfg).map_err(e2s)?
        };
        let flat = |ts: &[Tensor<f32>]| ts.iter().flat_map(|t| t.data().iter().map(|&v| v as f64)).collect::<Vec<_>>();
        let (a, b) = (flat(&before), flat(&after));
        let norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_norm = worst_norm.max(norm / max_norm);
        ensure(norm <= max_norm * (1.0 + 1e-6), || format!("set {set}: post-clip norm {norm}"))?;
        if factor < 1.0 {
            scaled += 1;
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = dot / (na * norm);
            worst_cos = worst_cos.max((cos - 1.0).abs());
            ensure((cos - 1.0).abs() <= 1e-6, || format!("set {set}: cosine {cos}"))?;
        } else {
            ensure(a == b, || format!("set {set}: untouched gradients changed"))?;
        }
        let mut again = after.clone();
        {
            let mut refs: Vec<&mut Tensor<f32>> = again.iter_mut().collect();
            clip_global_norm(&mut refs, cfg).map_err(e2s)?;
        }
        ensure(again.iter().zip(&after).all(|(x, y)| x.bit_eq(y)), || format!("set {set}: second clip changed bits"))?;
    }
    ensure(scaled > 100 && scaled < 1000, || format!("only {scaled} sets exercised scaling"))?;
    Ok(format!(
        "1000 sets, {scaled} scaled, max norm/limit {worst_norm:.9}, max |cos-1| {worst_cos:.1e}"
    ))
}

// scheduler state machine

/// Direct simulation of the rule: strict improvement resets the count; a
/// count exceeding `patience` multiplies lr by `factor` (floored) and resets.
fn scheduler_oracle(metrics: &[f64], lr0: f64, factor: f64, patience: usize, min_lr: f64) -> (Vec<f64>, usize) {
    let mut best = f64::INFINITY;
    let (mut bad, mut lr, mut fired) = (0usize, lr0, 0usize);
    let mut lrs = Vec::new();
    for &m in metrics {
        if m < best {
            best = m;
            bad = 0;
        } else {
            bad += 1;
            if bad > patience {
                lr = f64::max(lr * factor, min_lr);
                bad = 0;
                fired += 1;
            }
        }
        lrs.push(lr);
    }
    (lrs, fired)
}

fn scheduler() -> Outcome {
    let cfg = PlateauConfig::default();
    ensure(cfg.factor == 0.1 && cfg.patience == 2 && cfg.mode == MonitorMode::Min, || {
        format!("defaults {cfg:?}")
    })?;
    let mut s = PlateauScheduler::new(cfg, 1e-4).map_err(e2s)?;
    let lrs: Vec<f64> = [1.0, 0.9, 0.95, 0.96, 0.97]
        .iter()
        .map(|&m| s.step(m).unwrap())
        .collect();
    ensure(lrs[..4].iter().all(|&l| l == 1e-4) && (lrs[4] - 1e-5).abs() < 1e-18, || {
        format!("worked sequence gave {lrs:?}")
    })?;

    let mut rng = SplitMix64::new(77);
    let mut total = 0;
    for case in 0..10_000 {
        let len = 1 + rng.below(40) as usize;
        let patience = rng.below(5) as usize;
        let factor = [0.1, 0.5, 0.2][rng.below(3) as usize];
        let levels = 2 + rng.below(6);
        // few distinct levels so ties and plateaus are common
        let metrics: Vec<f64> = (0..len).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let pc = PlateauConfig {
            factor,
            patience,
            mode: MonitorMode::Min,
            min_lr: 1e-7,
        };
        let mut s = PlateauScheduler::new(pc, 1e-3).map_err(e2s)?;
        let got: Vec<f64> = metrics.iter().map(|&m| s.step(m).unwrap()).collect();
        let (want, fired) = scheduler_oracle(&metrics, 1e-3, factor, patience, 1e-7);
        ensure(s.reductions() == fired && got == want, || {
            format!("case {case}: {metrics:?} p={patience}: got {} reductions {got:?}, oracle {fired} {want:?}", s.reductions())
        })?;
        total += fired;
    }
    Ok(format!("worked sequence 1e-4 -> 1e-5 at step 5; 10000 sequences, {total} reductions all matched"))
}

// early stopping

fn small_tree(seed: u64) -> ParamTree<f32> {
    let mut rng = SplitMix64::new(seed);
    let mut t = ParamTree::new();
    for (name, shape) in [("features.0.weight", vec![4, 3]), ("head.1.weight", vec![2, 4]), ("head.1.bias", vec![2])] {
        let n: usize = shape.iter().product();
        let v = Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap();
        t.insert(name, Param::weight(v)).unwrap();
    }
    t
}

fn perturb(tree: &mut ParamTree<f32>, adam: &mut Adam<f32>, epoch: usize) {
    for (_, p) in tree.iter_mut() {
        p.grad = Some(p.value.map(|v| v * 0.5 + 0.1 * epoch as f32));
    }
    adam.step(tree).unwrap();
}

fn early_stopping() -> Outcome {
    ensure(EarlyStopConfig::default().patience == 5, || "default patience is not 5".into())?;
    let seq = [0.90, 0.92, 0.91, 0.91, 0.91, 0.91, 0.91, 0.91];
    let mut tree = small_tree(1);
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    });
    let mut stopper = EarlyStopper::new(EarlyStopConfig {
        patience: 5,
        mode: MonitorMode::Max,
    });
    let mut at_best = None;
    let mut stopped_at = None;
    for (i, &m) in seq.iter().enumerate() {
        perturb(&mut tree, &mut adam, i);
        if i == 1 {
            at_best = Some(tree.clone());
        }
        if stopper.update(m, &tree).map_err(e2s)? == StopDecision::Stop {
            stopped_at = Some(i + 1);
            break;
        }
    }
    ensure(stopped_at == Some(8), || format!("stopped at {stopped_at:?}, expected 8"))?;
    ensure(stopper.best_epoch() == Some(2), || format!("best epoch {:?}", stopper.best_epoch()))?;
    ensure(matches!(stopper.update(0.99, &tree), Err(Error::AlreadyStopped)), || "update after stop accepted".into())?;
    let best = at_best.unwrap();
    // mutate the live model further; the snapshot must not follow
    perturb(&mut tree, &mut adam, 9);
    stopper.restore_best(&mut tree).map_err(e2s)?;
    for (name, p) in best.iter() {
        ensure(tree.get(name).unwrap().value.bit_eq(&p.value), || format!("{name} differs from epoch-2 snapshot"))?;
    }
    perturb(&mut tree, &mut adam, 10);
    let snap = stopper.best_weights().unwrap();
    ensure(best.iter().all(|(n, p)| snap.get(n).unwrap().bit_eq(&p.value)), || {
        "snapshot followed a later adam step".into()
    })?;

    let mut zero = EarlyStopper::new(EarlyStopConfig {
        patience: 0,
        mode: MonitorMode::Max,
    });
    let t = small_tree(2);
    ensure(zero.update(0.9, &t).map_err(e2s)? == StopDecision::Continue, || "patience 0 stopped early".into())?;
    ensure(zero.update(0.8, &t).map_err(e2s)? == StopDecision::Stop, || "patience 0 did not stop".into())?;

    let mut never = EarlyStopper::new(EarlyStopConfig::default());
    for i in 0..500 {
        ensure(never.update(i as f64, &t).map_err(e2s)? == StopDecision::Continue, || format!("stopped at {i}"))?;
    }
    Ok("stop at value 8, best epoch 2 restored bitwise, snapshot immune, patience-0 and improving cases".into())
}

// freezing contract

fn freeze_run(arch: Arch) -> Result<String, String> {
    let mut model = BuiltModel::<f32>::build(&ModelConfig::new(arch), 5).map_err(e2s)?;
    model.freeze_backbone();
    let trainable = model.params.trainable_names();
    ensure(trainable.iter().all(|n| n.starts_with(HEAD_PREFIX)), || format!("{arch:?}: trainable {trainable:?}"))?;
    let trunk_before = model.params.checksums(BACKBONE_PREFIX);
    let head_before = model.params.checksums(HEAD_PREFIX);
    let ds = synth::generate(&SynthSpec::new(Variant::A, 8, 3)).map_err(e2s)?;
    let pipe = AugmentPipeline::deterministic(64);
    let mut adam = Adam::new(AdamConfig::default());
    let clip = ClipConfig::default();
    let mut loss = f64::NAN;
    for step in 0..100u64 {
        // 100 steps of 8 samples; epoch-seeded shuffles give different batches
        let batch = ftkit_core::augment::batches(&ds, 8, Some(11), step / 10, Some(&pipe))
            .map_err(e2s)?
            .nth((step % 10) as usize)
            .unwrap()
            .map_err(e2s)?;
        model.params.zero_grads();
        let out = model
            .loss_and_grads(&batch.images, &batch.labels, Mode::Train, step)
            .map_err(e2s)?;
        loss = out.loss;
        ftkit_core::optim::clip_tree(&mut model.params, clip).map_err(e2s)?;
        adam.step(&mut model.params).map_err(e2s)?;
    }
    let trunk_after = model.params.checksums(BACKBONE_PREFIX);
    ensure(trunk_before == trunk_after, || {
        let changed: Vec<_> = trunk_before
            .iter()
            .zip(&trunk_after)
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.0.clone())
            .collect();
        format!("{arch:?}: backbone tensors changed: {changed:?}")
    })?;
    let head_after = model.params.checksums(HEAD_PREFIX);
    let weights: Vec<_> = head_before.iter().zip(&head_after).collect();
    ensure(weights.iter().all(|(a, b)| a != b), || format!("{arch:?}: some head tensor never changed"))?;
    Ok(format!("{arch:?}: {} trunk tensors fixed, {} head tensors moved, final loss {loss:.3}", trunk_after.len(), head_after.len()))
}

fn freezing() -> Outcome {
    Ok(format!("{}; {}", freeze_run(Arch::MiniVgg)?, freeze_run(Arch::MiniWideResnet)?))
}

// augmentation algebra

fn random_image(rng: &mut SplitMix64, h: usize, w: usize) -> Tensor<f32> {
    Tensor::new([3, h, w], (0..3 * h * w).map(|_| rng.next_f64() as f32).collect()).unwrap()
}

fn augmentation() -> Outcome {
    let mut rng = SplitMix64::new(31);
    for case in 0..100 {
        let (h, w) = (1 + rng.below(20) as usize, 1 + rng.below(20) as usize);
        let x = random_image(&mut rng, h, w);
        ensure(hflip(&hflip(&x).unwrap()).unwrap().bit_eq(&x), || format!("case {case}: hflip twice"))?;
        ensure(vflip(&vflip(&x).unwrap()).unwrap().bit_eq(&x), || format!("case {case}: vflip twice"))?;
        let mut r = x.clone();
        for _ in 0..4 {
            r = rot90(&r, 1).unwrap();
        }
        ensure(r.bit_eq(&x), || format!("case {case}: rot90 four times"))?;
        ensure(hflip(&vflip(&x).unwrap()).unwrap().bit_eq(&rot90(&x, 2).unwrap()), || {
            format!("case {case}: hflip.vflip != rot180")
        })?;
        let c = rng.next_f64() as f32;
        let sigma = rng.uniform(0.1, 3.0);
        let flat = Tensor::full([3, h, w], c);
        let blurred = gaussian_blur(&flat, sigma).map_err(e2s)?;
        let dev = blurred.data().iter().map(|&v| (v - c).abs() as f64).fold(0.0, f64::max);
        ensure(dev <= 1e-6, || format!("case {case}: blur of constant moved by {dev:e}"))?;
    }

    let pipe = AugmentPipeline::standard(32, 99);
    let mut differs = 0;
    for case in 0..50u64 {
        let x = random_image(&mut rng, 32, 32);
        let a = pipe.apply(&x, case % 3, case).map_err(e2s)?;
        let b = pipe.apply(&x, case % 3, case).map_err(e2s)?;
        ensure(a.bit_eq(&b), || format!("pipeline not pure at case {case}"))?;
        if !a.bit_eq(&pipe.apply(&x, case % 3 + 1, case).map_err(e2s)?) {
            differs += 1;
        }
    }
    ensure(differs > 25, || format!("epoch changed output in only {differs}/50 cases"))?;

    let px = RgbImage::new(1, 1, vec![0, 0, 0]).unwrap();
    for pair in 0..200 {
        let k = 1 + rng.below(5) as usize;
        let sizes: Vec<usize> = (0..k).map(|_| 2 + rng.below(300) as usize).collect();
        let fraction = rng.uniform(0.01, 0.99);
        let mut items = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                items.push(Item {
                    path: format!("c{c}/{i}"),
                    label: c,
                    image: std::sync::Arc::new(px.clone()),
                });
            }
        }
        let classes = (0..k).map(|c| format!("c{c}")).collect();
        let ds = Dataset::from_items(classes, items).map_err(e2s)?;
        let spec = SplitSpec {
            train_fraction: fraction,
            seed: pair,
            stratified: true,
        };
        let (train, val) = split_indices(&ds, &spec).map_err(e2s)?;
        for (c, &n) in sizes.iter().enumerate() {
            let want = (fraction * n as f64).round() as usize;
            let got = train.iter().filter(|&&i| ds.items()[i].label == c).count();
            ensure(got == want, || format!("pair {pair}: class {c} n={n} f={fraction}: {got} != {want}"))?;
        }
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        ensure(all == (0..ds.len()).collect::<Vec<_>>(), || format!("pair {pair}: not a partition"))?;
    }
    Ok("100 images: involutions, rot90^4, blur constancy; pipeline purity; 200 split pairs exact".into())
}

// overfit sanity

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let fixture = synth::generate_counts(&SynthSpec::new(Variant::A, 0, 1), &synth::even_counts(64)).map_err(e2s)?;
    synth::write_dataset(&fixture, dir.path()).map_err(e2s)?;
    let ds = Dataset::load(dir.path()).map_err(e2s)?;
    ensure(ds.len() == 64 && ds.num_classes() == 10, || format!("fixture has {} items", ds.len()))?;

    let pipe = AugmentPipeline::deterministic(64);
    let mut model = BuiltModel::<f32>::build(&ModelConfig::new(Arch::MiniVgg), 0).map_err(e2s)?;
    let mut adam = Adam::new(AdamConfig {
        lr: 1e-3,
        ..AdamConfig::default()
    });
    let ln10 = 10f64.ln();
    let batch = 8;
    let mut first_loss = f64::NAN;
    for epoch in 0..200u64 {
        train_epoch(&mut model, &mut adam, ClipConfig::default(), &ds, batch, 0, 0, epoch, &pipe).map_err(e2s)?;
        let ev = evaluate(&mut model, &ds, 64, &pipe).map_err(e2s)?;
        if epoch == 0 {
            first_loss = ev.loss;
            ensure(ev.loss < ln10, || format!("fixture loss after epoch 1 is {:.4} >= ln 10", ev.loss))?;
        }
        if ev.accuracy().map_err(e2s)? == 1.0 {
            return Ok(format!(
                "100% train accuracy after epoch {}; loss after epoch 1 {first_loss:.4} < ln 10",
                epoch + 1
            ));
        }
    }
    Err("train accuracy below 100% after 200 epochs".into())
}

// transfer-learning desk experiment

const PRETRAIN_EPOCHS: u64 = 2;
const PRETRAIN_BATCH: usize = 16;

fn transfer_seed(seed: u64, root: &Path) -> Result<(f64, f64), String> {
    let pipe = AugmentPipeline::deterministic(64);
    let a = synth::generate(&SynthSpec::new(Variant::A, 500, seed)).map_err(e2s)?;
    let mut pre = BuiltModel::<f32>::build(&ModelConfig::new(Arch::MiniVgg), seed).map_err(e2s)?;
    let mut adam = Adam::new(AdamConfig::default());
    for e in 0..PRETRAIN_EPOCHS {
        train_epoch(&mut pre, &mut adam, ClipConfig::default(), &a, PRETRAIN_BATCH, seed, seed, e, &pipe)
            .map_err(e2s)?;
    }
    let trunk = root.join(format!("trunk-{seed}.ftk1"));
    checkpoint::save_checkpoint(&pre.params, &Meta::new(), &trunk).map_err(e2s)?;

    let data = root.join(format!("b-{seed}"));
    synth::write_tree(&SynthSpec::new(Variant::B, 50, seed), &data).map_err(e2s)?;
    let arm = |init: Option<&Path>, name: &str| -> Result<f64, String> {
        let mut cfg = TrainerConfig::new(ModelConfig::new(Arch::MiniVgg));
        cfg.data_root = Some(data.clone());
        cfg.augment = false;
        cfg.seeds = Seeds::all(seed);
        cfg.split.seed = seed;
        cfg.init_checkpoint = init.map(Path::to_path_buf);
        let prep = trainer::prepare(&cfg).map_err(e2s)?;
        let out = trainer::run(prep, &root.join(format!("{name}-{seed}")), RunOptions { no_timing: true })
            .map_err(e2s)?;
        Ok(out.history.best().map(|r| r.val_acc).unwrap_or(0.0))
    };
    Ok((arm(Some(&trunk), "pretrained")?, arm(None, "random")?))
}

fn transfer() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut diffs = Vec::new();
    let mut parts = Vec::new();
    for seed in 0..3 {
        let (p, r) = transfer_seed(seed, dir.path())?;
        parts.push(format!("seed {seed}: {:.1}% vs {:.1}%", p * 100.0, r * 100.0));
        diffs.push(p - r);
    }
    diffs.sort_by(f64::total_cmp);
    let median = diffs[1];
    let detail = format!("{}; median gain {:.1} pp", parts.join(", "), median * 100.0);
    ensure(median >= 0.10, || detail.clone())?;
    Ok(detail)
}

// determinism

fn ftkit(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_ftkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(e2s)?;
    ensure(out.status.success(), || {
        format!("ftkit {args:?} failed: {}", String::from_utf8_lossy(&out.stderr))
    })
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let data = dir.path().join("data");
    synth::write_tree(&SynthSpec::new(Variant::A, 20, 4), &data).map_err(e2s)?;
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, r#"{"arch": "mini_vgg", "max_epochs": 3, "freeze_backbone": false}"#).map_err(e2s)?;
    let started = Instant::now();
    let mut outs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (c, d, o) = (cfg.to_str().unwrap(), data.to_str().unwrap(), out.to_str().unwrap());
        ftkit(&["train", "--config", c, "--data", d, "--out", o, "--no-timing"])?;
        outs.push(out);
    }
    for file in ["best.ftk1", "history.json", "history.csv", "confusion.csv", "train.manifest", "val.manifest"] {
        let a = fs::read(outs[0].join(file)).map_err(e2s)?;
        let b = fs::read(outs[1].join(file)).map_err(e2s)?;
        ensure(a == b, || format!("{file} differs between runs"))?;
    }
    Ok(format!(
        "two train runs byte-identical (best.ftk1, history, confusion, manifests) in {:.0}s",
        started.elapsed().as_secs_f64()
    ))
}

// checkpoint round-trip

fn random_tree(rng: &mut SplitMix64) -> ParamTree<f32> {
    let mut t = ParamTree::new();
    for i in 0..1 + rng.below(6) {
        let rank = 1 + rng.below(4) as usize;
        let mut shape: Vec<usize> = (0..rank).map(|_| 1 + rng.below(64) as usize).collect();
        while shape.iter().product::<usize>() > 1 << 15 {
            let j = rng.below(rank as u64) as usize;
            shape[j] = 1.max(shape[j] / 2);
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect();
        let p = Param::weight(Tensor::new(shape, data).unwrap());
        t.insert(format!("t{i}.weight"), p).unwrap();
    }
    t
}

fn checkpoints() -> Outcome {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let path = dir.path().join("c.ftk1");
    let mut rng = SplitMix64::new(5);
    for case in 0..300 {
        let tree = random_tree(&mut rng);
        checkpoint::save_checkpoint(&tree, &Meta::new(), &path).map_err(e2s)?;
        let back = checkpoint::load_checkpoint(&path, Some(&tree)).map_err(e2s)?.tree;
        let bare = checkpoint::load_checkpoint(&path, None).map_err(e2s)?.tree;
        for (name, p) in tree.iter() {
            ensure(back.get(name).is_some_and(|q| q.value.bit_eq(&p.value)), || format!("case {case}: {name}"))?;
            ensure(bare.get(name).is_some_and(|q| q.value.bit_eq(&p.value)), || format!("case {case}: {name}"))?;
        }
    }

    let tree = random_tree(&mut rng);
    checkpoint::save_checkpoint(&tree, &Meta::new(), &path).map_err(e2s)?;
    let good = fs::read(&path).map_err(e2s)?;
    let bad = dir.path().join("bad.ftk1");
    let load = |bytes: &[u8]| {
        fs::write(&bad, bytes).unwrap();
        checkpoint::load_checkpoint(&bad, None)
    };
    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"XXXX");
    ensure(matches!(load(&magic), Err(Error::BadMagic { .. })), || "bad magic not detected".into())?;
    let mut json = good.clone();
    json[8] = b'#';
    ensure(matches!(load(&json), Err(Error::HeaderJson(_))), || "bad header JSON not detected".into())?;
    ensure(matches!(load(&good[..good.len() - 1]), Err(Error::Truncated { .. })), || "truncation not detected".into())?;
    let mut other = tree.clone();
    let first = other.names().next().unwrap().to_string();
    other.get_mut(&first).unwrap().value = Tensor::zeros([3, 1, 2]);
    ensure(
        matches!(checkpoint::load_checkpoint(&path, Some(&other)), Err(Error::CheckpointShape { ref name, .. }) if *name == first),
        || "shape mismatch not detected".into(),
    )?;
    ensure(
        matches!(checkpoint::save_checkpoint(&ParamTree::<f32>::new(), &Meta::new(), &path), Err(Error::EmptyTree)),
        || "empty tree accepted".into(),
    )?;
    let mut wide = ParamTree::<f64>::new();
    wide.insert("w", Param::weight(Tensor::ones([2]))).unwrap();
    ensure(
        matches!(checkpoint::save_checkpoint(&wide, &Meta::new(), &path), Err(Error::UnsupportedDtype(_))),
        || "f64 tree accepted".into(),
    )?;
    Ok("300 random trees bitwise; magic, JSON, truncation, shape, empty, f64 errors raised".into())
}

// metrics oracle

fn metrics() -> Outcome {
    let mut rng = SplitMix64::new(8);
    for set in 0..1000 {
        let k = 2 + rng.below(12) as usize;
        let n = 1 + rng.below(500) as usize;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k as u64) as usize).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&y| if rng.next_f64() < 0.6 { y } else { rng.below(k as u64) as usize })
            .collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.update(&preds, &labels).map_err(e2s)?;
        let hits = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        let brute = hits as f64 / n as f64;
        let acc = cm.accuracy().map_err(e2s)?;
        ensure(acc == brute, || format!("set {set}: {acc} != {brute}"))?;
        let per = cm.per_class_accuracy().map_err(e2s)?;
        for (c, got) in per.iter().enumerate() {
            let rows = labels.iter().filter(|&&y| y == c).count();
            let diag = labels.iter().zip(&preds).filter(|(&y, &p)| y == c && p == c).count();
            let want = (rows > 0).then(|| diag as f64 / rows as f64);
            ensure(*got == want, || format!("set {set}: class {c} {got:?} != {want:?}"))?;
        }
    }
    Ok("1000 random prediction sets: accuracy and per-class equal brute-force recount".into())
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        name: "gradient-correctness",
        limit: Some(Duration::from_secs(60)),
        run: gradients,
    },
    Criterion {
        name: "clipping-contract",
        limit: Some(Duration::from_secs(10)),
        run: clipping,
    },
    Criterion {
        name: "scheduler-state-machine",
        limit: Some(Duration::from_secs(10)),
        run: scheduler,
    },
    Criterion {
        name: "early-stopping",
        limit: Some(Duration::from_secs(10)),
        run: early_stopping,
    },
    Criterion {
        name: "freezing-contract",
        limit: Some(Duration::from_secs(120)),
        run: freezing,
    },
    Criterion {
        name: "augmentation-algebra",
        limit: Some(Duration::from_secs(30)),
        run: augmentation,
    },
    Criterion {
        name: "overfit-sanity",
        limit: Some(Duration::from_secs(600)),
        run: overfit,
    },
    Criterion {
        name: "transfer-learning",
        limit: Some(Duration::from_secs(1800)),
        run: transfer,
    },
    Criterion {
        name: "determinism",
        limit: None,
        run: determinism,
    },
    Criterion {
        name: "checkpoint-round-trip",
        limit: Some(Duration::from_secs(10)),
        run: checkpoints,
    },
    Criterion {
        name: "metrics-oracle",
        limit: Some(Duration::from_secs(10)),
        run: metrics,
    },
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = started.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if took > limit => Err(format!("took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs())),
            (r, _) => r,
        };
        let limit = c.limit.map_or("-".to_string(), |l| format!("{}s", l.as_secs()));
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:<24} {:>7.1}s (limit {limit})  {detail}", c.name, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
