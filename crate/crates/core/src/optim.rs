//! Adam, global-norm gradient clipping, plateau LR scheduling and early stopping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamTree, Snapshot};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_MAX_NORM: f64 = 0.1;

/// Relative slack before clipping fires. A gradient set that was just
/// clipped has a recomputed norm within rounding of `max_norm`; without the
/// slack a second clip would rescale it again.
pub const CLIP_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Moments<T: Element> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Adam with bias correction. Moments are keyed by parameter name and created lazily.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    pub config: AdamConfig,
    step: u64,
    moments: IndexMap<String, Moments<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments<T>)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Rebuilds optimizer state, e.g. from a checkpoint.
    pub fn from_parts(config: AdamConfig, step: u64, moments: Vec<(String, Moments<T>)>) -> Self {
        Self {
            config,
            step,
            moments: moments.into_iter().collect(),
        }
    }

    /// One update of every trainable weight in `tree`. Frozen weights and
    /// buffers are untouched. Every trainable weight must carry a gradient.
    pub fn step(&mut self, tree: &mut ParamTree<T>) -> Result<()> {
        if let Some((name, _)) = tree.iter().find(|(_, p)| p.trainable() && p.grad.is_none()) {
            return Err(Error::MissingGradient(name.to_string()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        let (inv_bias1, inv_bias2) = (T::of(1.0 / bias1), T::of(1.0 / bias2));

        for (name, p) in tree.iter_mut() {
            if !p.trainable() {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: p.value.zeros_like(),
                v: p.value.zeros_like(),
            });
            if st.m.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: p.value.shape().to_vec(),
                    rhs: st.m.shape().to_vec(),
                });
            }
            let values = p.value.data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for i in 0..values.len() {
                let g = grad.data()[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] * inv_bias1;
                let v_hat = v[i] * inv_bias2;
                let update = lr * m_hat / (v_hat.sqrt() + eps);
                // skipping exact-zero updates keeps untouched params bitwise stable (incl. -0.0)
                if update != T::zero() {
                    values[i] = values[i] - update;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub max_norm: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            max_norm: DEFAULT_MAX_NORM,
        }
    }
}

/// Euclidean norm over the concatenation of all tensors.
pub fn global_norm<T: Element>(grads: &[&mut Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.sum_squares_f64()).sum::<f64>().sqrt()
}

/// Scales all gradients by `max_norm / g` when their collective norm `g`
/// exceeds `max_norm`; returns the factor applied (1.0 when untouched).
pub fn clip_global_norm<T: Element>(grads: &mut [&mut Tensor<T>], cfg: ClipConfig) -> Result<f64> {
    if !(cfg.max_norm > 0.0) {
        return Err(Error::invalid("clip_global_norm", "max_norm must be positive"));
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    let norm = global_norm(grads);
    if norm <= cfg.max_norm * (1.0 + CLIP_SLACK) {
        return Ok(1.0);
    }
    let factor = cfg.max_norm / norm;
    let f = T::of(factor);
    for g in grads.iter_mut() {
        g.scale_in_place(f);
    }
    Ok(factor)
}

/// Clips the gradients of every trainable parameter in the tree.
pub fn clip_tree<T: Element>(tree: &mut ParamTree<T>, cfg: ClipConfig) -> Result<f64> {
    let mut grads: Vec<&mut Tensor<T>> = tree
        .iter_mut()
        .filter(|(_, p)| p.trainable())
        .filter_map(|(_, p)| p.grad.as_mut())
        .collect();
    clip_global_norm(&mut grads, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MonitorMode {
    Min,
    Max,
}

impl MonitorMode {
    fn worst(self) -> f64 {
        match self {
            MonitorMode::Min => f64::INFINITY,
            MonitorMode::Max => f64::NEG_INFINITY,
        }
    }

    /// Strict improvement, no min-delta.
    pub fn improves(self, candidate: f64, best: f64) -> bool {
        match self {
            MonitorMode::Min => candidate < best,
            MonitorMode::Max => candidate > best,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub mode: MonitorMode,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.1,
            patience: 2,
            mode: MonitorMode::Min,
            min_lr: 1e-7,
        }
    }
}

/// Reduce-on-plateau learning-rate schedule, ticked once per epoch.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    best: f64,
    bad_epochs: usize,
    lr: f64,
    reductions: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig, initial_lr: f64) -> Result<Self> {
        if !(cfg.factor > 0.0 && cfg.factor < 1.0) {
            return Err(Error::Config(format!("plateau factor must be in (0,1), got {}", cfg.factor)));
        }
        if !(cfg.min_lr > 0.0) || !(initial_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(Self {
            cfg,
            best: cfg.mode.worst(),
            bad_epochs: 0,
            lr: initial_lr.max(cfg.min_lr),
            reductions: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn bad_epochs(&self) -> usize {
        self.bad_epochs
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Number of times the reduction fired (including clamped ones).
    pub fn reductions(&self) -> usize {
        self.reductions
    }

    pub fn step(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::NonFinite("scheduler metric".into()));
        }
        if self.cfg.mode.improves(metric, self.best) {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
                self.bad_epochs = 0;
                self.reductions += 1;
            }
        }
        Ok(self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub mode: MonitorMode,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            mode: MonitorMode::Max,
        }
    }
}

/// Tracks the best epoch and a deep copy of its weights.
#[derive(Debug, Clone)]
pub struct EarlyStopper<T: Element> {
    cfg: EarlyStopConfig,
    best_metric: f64,
    best_epoch: Option<usize>,
    best_weights: Option<Snapshot<T>>,
    counter: usize,
    updates: usize,
    stopped: bool,
}

impl<T: Element> EarlyStopper<T> {
    pub fn new(cfg: EarlyStopConfig) -> Self {
        Self {
            cfg,
            best_metric: cfg.mode.worst(),
            best_epoch: None,
            best_weights: None,
            counter: 0,
            updates: 0,
            stopped: false,
        }
    }

    pub fn best_metric(&self) -> f64 {
        self.best_metric
    }

    /// 1-based index of the update that produced the best metric.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_weights(&self) -> Option<&Snapshot<T>> {
        self.best_weights.as_ref()
    }

    pub fn counter(&self) -> usize {
        self.counter
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    /// Records one epoch's metric. On improvement the current weights are deep-copied.
    pub fn update(&mut self, metric: f64, weights: &ParamTree<T>) -> Result<StopDecision> {
        if self.stopped {
            return Err(Error::AlreadyStopped);
        }
        if !metric.is_finite() {
            return Err(Error::NonFinite("early-stopping metric".into()));
        }
        self.updates += 1;
        if self.cfg.mode.improves(metric, self.best_metric) {
            self.best_metric = metric;
            self.best_epoch = Some(self.updates);
            self.best_weights = Some(weights.snapshot());
            self.counter = 0;
        } else {
            self.counter += 1;
            if self.counter > self.cfg.patience {
                self.stopped = true;
                return Ok(StopDecision::Stop);
            }
        }
        Ok(StopDecision::Continue)
    }

    /// Copies the best-epoch weights back into `model`.
    pub fn restore_best(&self, model: &mut ParamTree<T>) -> Result<()> {
        let snap = self.best_weights.as_ref().ok_or(Error::NoSnapshot)?;
        model.restore(snap)
    }
}
