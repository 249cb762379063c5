//! Layer specifications, parameter binding and stack forward passes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{window_out, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Param, ParamTree};
use crate::rng::{fnv1a, mix_seed, SplitMix64};
use crate::tensor::{Element, Tensor};

pub const DEFAULT_DROPOUT: f64 = 0.5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    /// 1×1 → 3×3 → 1×1 with batch-norm after each conv and ReLU after the sum.
    Bottleneck,
    /// Pre-activation basic block: (BN → ReLU → 3×3 conv) × 2, plain sum.
    PreActBasic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSpec {
    pub style: BlockStyle,
    pub in_ch: usize,
    /// Inner width of the bottleneck; ignored by basic blocks.
    pub mid_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl ResidualSpec {
    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_ch != self.out_ch
    }

    fn members(&self) -> Vec<(&'static str, LayerSpec)> {
        let conv = |in_ch, out_ch, kernel, stride, padding| LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
            bias: false,
        };
        let bn = |channels| LayerSpec::BatchNorm2d {
            channels,
            momentum: self.momentum,
            eps: self.eps,
        };
        let mut m = match self.style {
            BlockStyle::Bottleneck => vec![
                ("conv1", conv(self.in_ch, self.mid_ch, 1, 1, 0)),
                ("bn1", bn(self.mid_ch)),
                ("conv2", conv(self.mid_ch, self.mid_ch, 3, self.stride, 1)),
                ("bn2", bn(self.mid_ch)),
                ("conv3", conv(self.mid_ch, self.out_ch, 1, 1, 0)),
                ("bn3", bn(self.out_ch)),
            ],
            BlockStyle::PreActBasic => vec![
                ("bn1", bn(self.in_ch)),
                ("conv1", conv(self.in_ch, self.out_ch, 3, self.stride, 1)),
                ("bn2", bn(self.out_ch)),
                ("conv2", conv(self.out_ch, self.out_ch, 3, 1, 1)),
            ],
        };
        if self.has_projection() {
            match self.style {
                BlockStyle::Bottleneck => {
                    m.push(("downsample.0", conv(self.in_ch, self.out_ch, 1, self.stride, 0)));
                    m.push(("downsample.1", bn(self.out_ch)));
                }
                BlockStyle::PreActBasic => {
                    m.push(("shortcut", conv(self.in_ch, self.out_ch, 1, self.stride, 0)));
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dropout {
        p: f64,
    },
    BatchNorm2d {
        channels: usize,
        momentum: f64,
        eps: f64,
    },
    Flatten,
    LogSoftmax,
    GlobalAvgPool,
    ResidualBlock(ResidualSpec),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    buffer: bool,
}

impl LayerSpec {
    pub fn conv3x3(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::Conv2d {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: true,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec::BatchNorm2d {
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 => {
                bad("conv2d extents must be positive")
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => bad("linear extents must be positive"),
            LayerSpec::MaxPool2d { kernel, stride, padding }
                if kernel == 0 || stride == 0 || 2 * padding > kernel =>
            {
                bad("maxpool2d needs positive kernel/stride and padding ≤ kernel/2")
            }
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => bad("dropout p must be in [0, 1)"),
            LayerSpec::BatchNorm2d {
                channels,
                momentum,
                eps,
            } if channels == 0 || !(0.0..=1.0).contains(&momentum) || eps <= 0.0 => {
                bad("batchnorm2d needs channels > 0, momentum in [0,1], eps > 0")
            }
            LayerSpec::ResidualBlock(r) => {
                if r.stride == 0 || r.in_ch == 0 || r.out_ch == 0 {
                    return bad("residual block extents must be positive");
                }
                if r.style == BlockStyle::Bottleneck && r.mid_ch == 0 {
                    return bad("bottleneck width must be positive");
                }
                r.members().iter().try_for_each(|(_, s)| s.validate())
            }
            _ => Ok(()),
        }
    }

    fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let p = |suffix: &str, shape: Vec<usize>, init, buffer| ParamSpec {
            name: format!("{prefix}.{suffix}"),
            shape,
            init,
            buffer,
        };
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_ch * kernel * kernel;
                let mut v = vec![p(
                    "weight",
                    vec![out_ch, in_ch, kernel, kernel],
                    Init::KaimingUniform { fan_in },
                    false,
                )];
                if bias {
                    v.push(p("bias", vec![out_ch], Init::Zeros, false));
                }
                v
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![
                p(
                    "weight",
                    vec![out_features, in_features],
                    Init::KaimingUniform { fan_in: in_features },
                    false,
                ),
                p("bias", vec![out_features], Init::Zeros, false),
            ],
            LayerSpec::BatchNorm2d { channels, .. } => vec![
                p("weight", vec![channels], Init::Ones, false),
                p("bias", vec![channels], Init::Zeros, false),
                p("running_mean", vec![channels], Init::Zeros, true),
                p("running_var", vec![channels], Init::Ones, true),
            ],
            LayerSpec::ResidualBlock(r) => r
                .members()
                .iter()
                .flat_map(|(sub, spec)| spec.param_specs(&format!("{prefix}.{sub}")))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Learnable scalar count, in closed form from the hyperparameters.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => out_ch * in_ch * kernel * kernel + if bias { out_ch } else { 0 },
            LayerSpec::Linear {
                in_features,
                out_features,
            } => out_features * (in_features + 1),
            LayerSpec::BatchNorm2d { channels, .. } => 2 * channels,
            LayerSpec::ResidualBlock(r) => r.members().iter().map(|(_, s)| s.param_count()).sum(),
            _ => 0,
        }
    }

    /// Output shape for a given input shape, or a description of what was expected.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let spatial = |input: &[usize], ch: Option<usize>| -> std::result::Result<(), String> {
            match (input.len(), ch) {
                (4, Some(c)) if input[1] != c => Err(format!("[N×{c}×H×W]")),
                (4, _) => Ok(()),
                (_, Some(c)) => Err(format!("[N×{c}×H×W]")),
                (_, None) => Err("[N×C×H×W]".into()),
            }
        };
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                spatial(input, Some(in_ch))?;
                let oh = window_out(input[2], kernel, stride, padding);
                let ow = window_out(input[3], kernel, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![input[0], out_ch, oh, ow]),
                    _ => Err(format!("spatial extent ≥ {kernel} after padding {padding}")),
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input.len() == 2 && input[1] == in_features {
                    Ok(vec![input[0], out_features])
                } else {
                    Err(format!("[N×{in_features}]"))
                }
            }
            LayerSpec::MaxPool2d {
                kernel,
                stride,
                padding,
            } => {
                spatial(input, None)?;
                let oh = window_out(input[2], kernel, stride, padding);
                let ow = window_out(input[3], kernel, stride, padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Ok(vec![input[0], input[1], oh, ow]),
                    _ => Err(format!("spatial extent ≥ {kernel}")),
                }
            }
            LayerSpec::BatchNorm2d { channels, .. } => {
                spatial(input, Some(channels))?;
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => {
                if input.len() < 2 {
                    return Err("[N×…] with rank ≥ 2".into());
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            LayerSpec::LogSoftmax => {
                if input.len() == 2 {
                    Ok(input.to_vec())
                } else {
                    Err("[N×K]".into())
                }
            }
            LayerSpec::GlobalAvgPool => {
                spatial(input, None)?;
                Ok(vec![input[0], input[1]])
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::ResidualBlock(r) => {
                spatial(input, Some(r.in_ch))?;
                // only the strided 3×3 conv (pad 1) changes the spatial extent
                match (window_out(input[2], 3, r.stride, 1), window_out(input[3], 3, r.stride, 1)) {
                    (Some(oh), Some(ow)) => Ok(vec![input[0], r.out_ch, oh, ow]),
                    _ => Err("non-empty spatial extent".into()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Full dotted prefix of this layer's parameters, e.g. `features.0`.
    pub name: String,
    pub spec: LayerSpec,
}

/// Ordered stack of layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, spec: LayerSpec) -> &mut Self {
        self.layers.push(Layer {
            name: name.into(),
            spec,
        });
        self
    }

    /// Appends using the layer's position as its name, e.g. `head.3`.
    pub fn push_indexed(&mut self, prefix: &str, spec: LayerSpec) -> &mut Self {
        let name = format!("{prefix}.{}", self.layers.len());
        self.push(name, spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.spec.validate())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for (index, layer) in self.layers.iter().enumerate() {
            shape = layer
                .spec
                .output_shape(&shape)
                .map_err(|expected| Error::LayerShape {
                    index,
                    name: layer.name.clone(),
                    expected,
                    actual: shape.clone(),
                })?;
        }
        Ok(shape)
    }

    /// Inserts freshly initialized parameters for every layer, in definition order.
    /// Each tensor draws from its own stream keyed by `(seed, name)`.
    pub fn init_params<T: Element>(&self, tree: &mut ParamTree<T>, seed: u64) -> Result<()> {
        for layer in &self.layers {
            for ps in layer.spec.param_specs(&layer.name) {
                let n: usize = ps.shape.iter().product();
                let data = match ps.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::KaimingUniform { fan_in } => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        let mut rng = SplitMix64::new(mix_seed(seed, 0, fnv1a(ps.name.as_bytes())));
                        (0..n).map(|_| T::of(rng.uniform(-bound, bound))).collect()
                    }
                };
                let tensor = Tensor::from_parts(ps.shape, data);
                let param = if ps.buffer {
                    Param::buffer(tensor)
                } else {
                    Param::weight(tensor)
                };
                tree.insert(ps.name, param)?;
            }
        }
        Ok(())
    }

    pub fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, mut x: Var) -> Result<Var> {
        for (index, layer) in self.layers.iter().enumerate() {
            let actual = ctx.graph.value(x).shape().to_vec();
            if let Err(expected) = layer.spec.output_shape(&actual) {
                return Err(Error::LayerShape {
                    index,
                    name: layer.name.clone(),
                    expected,
                    actual,
                });
            }
            x = layer_forward(ctx, &layer.name, &layer.spec, x)?;
        }
        Ok(x)
    }
}

/// Binds parameters from a tree into a graph for one forward pass.
pub struct ForwardCtx<'a, T: Element> {
    pub graph: &'a mut Graph<T>,
    pub params: &'a mut ParamTree<T>,
    pub mode: Mode,
    pub dropout_seed: u64,
    /// Batch-norm layers whose names start with this prefix always use running
    /// statistics and never update them (frozen trunk).
    pub frozen_bn_prefix: Option<String>,
    bound: HashMap<usize, Var>,
}

impl<'a, T: Element> ForwardCtx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, params: &'a mut ParamTree<T>, mode: Mode) -> Self {
        Self {
            graph,
            params,
            mode,
            dropout_seed: 0,
            frozen_bn_prefix: None,
            bound: HashMap::new(),
        }
    }

    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.dropout_seed = seed;
        self
    }

    pub fn with_frozen_bn(mut self, prefix: Option<String>) -> Self {
        self.frozen_bn_prefix = prefix;
        self
    }

    /// Leaf for the named parameter, created on first use. Frozen parameters
    /// enter the graph without `requires_grad`.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let p = self.params.by_index(idx);
        let v = self.graph.leaf(p.value.clone(), p.trainable());
        self.bound.insert(idx, v);
        Ok(v)
    }

    /// Adds graph gradients of every bound trainable parameter into the tree.
    pub fn collect_grads(&mut self) -> Result<()> {
        for (&idx, &v) in &self.bound {
            let p = self.params.by_index_mut(idx);
            if !p.trainable() {
                continue;
            }
            if let Some(g) = self.graph.grad(v) {
                match &mut p.grad {
                    Some(existing) => existing.add_assign(g)?,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        Ok(())
    }

    fn bn_frozen(&self, name: &str) -> bool {
        self.frozen_bn_prefix
            .as_deref()
            .is_some_and(|p| name.starts_with(p))
    }
}

/// Inverted dropout honoring the mode: identity in eval mode.
pub fn dropout<T: Element>(graph: &mut Graph<T>, x: Var, p: f64, mode: Mode, seed: u64) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("dropout", format!("p must be in [0, 1), got {p}")));
    }
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train => graph.dropout(x, p, seed),
    }
}

/// Batch normalization over `[N×C×H×W]` with running-statistics bookkeeping.
///
/// In train mode the batch's statistics normalize the input and the running
/// statistics are updated as `running ← (1−momentum)·running + momentum·batch`
/// (unbiased batch variance). In eval mode the running statistics are used.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<T: Element>(
    graph: &mut Graph<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    momentum: f64,
    eps: f64,
    mode: Mode,
) -> Result<Var> {
    match mode {
        Mode::Eval => graph.batchnorm2d_fixed(
            x,
            gamma,
            beta,
            running_mean.data(),
            running_var.data(),
            eps,
        ),
        Mode::Train => {
            let (y, stats) = graph.batchnorm2d_batch(x, gamma, beta, eps)?;
            let (keep, take) = (T::of(1.0 - momentum), T::of(momentum));
            for (r, &b) in running_mean.data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + take * b;
            }
            for (r, &b) in running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
                *r = keep * *r + take * b;
            }
            Ok(y)
        }
    }
}

fn layer_forward<T: Element>(
    ctx: &mut ForwardCtx<'_, T>,
    name: &str,
    spec: &LayerSpec,
    x: Var,
) -> Result<Var> {
    match *spec {
        LayerSpec::Conv2d {
            stride,
            padding,
            bias,
            ..
        } => {
            let w = ctx.param(&format!("{name}.weight"))?;
            let b = if bias {
                Some(ctx.param(&format!("{name}.bias"))?)
            } else {
                None
            };
            ctx.graph.conv2d(x, w, b, stride, padding)
        }
        LayerSpec::Linear { .. } => {
            let w = ctx.param(&format!("{name}.weight"))?;
            let b = ctx.param(&format!("{name}.bias"))?;
            ctx.graph.linear(x, w, Some(b))
        }
        LayerSpec::Relu => Ok(ctx.graph.relu(x)),
        LayerSpec::MaxPool2d {
            kernel,
            stride,
            padding,
        } => ctx.graph.maxpool2d(x, kernel, stride, padding),
        LayerSpec::Dropout { p } => {
            let seed = mix_seed(ctx.dropout_seed, 0, fnv1a(name.as_bytes()));
            dropout(ctx.graph, x, p, ctx.mode, seed)
        }
        LayerSpec::BatchNorm2d { momentum, eps, .. } => {
            let gamma = ctx.param(&format!("{name}.weight"))?;
            let beta = ctx.param(&format!("{name}.bias"))?;
            let mode = if ctx.bn_frozen(name) { Mode::Eval } else { ctx.mode };
            let mean_name = format!("{name}.running_mean");
            let var_name = format!("{name}.running_var");
            let mut rm = take_buffer(ctx.params, &mean_name)?;
            let mut rv = take_buffer(ctx.params, &var_name)?;
            let out = batchnorm2d(ctx.graph, x, gamma, beta, &mut rm, &mut rv, momentum, eps, mode);
            put_buffer(ctx.params, &mean_name, rm);
            put_buffer(ctx.params, &var_name, rv);
            out
        }
        LayerSpec::Flatten => ctx.graph.flatten(x),
        LayerSpec::LogSoftmax => ctx.graph.log_softmax(x),
        LayerSpec::GlobalAvgPool => ctx.graph.global_avg_pool(x),
        LayerSpec::ResidualBlock(r) => residual_forward(ctx, name, &r, x),
    }
}

fn take_buffer<T: Element>(tree: &mut ParamTree<T>, name: &str) -> Result<Tensor<T>> {
    let p = tree
        .get_mut(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    Ok(std::mem::replace(&mut p.value, Tensor::scalar(T::zero())))
}

fn put_buffer<T: Element>(tree: &mut ParamTree<T>, name: &str, value: Tensor<T>) {
    if let Some(p) = tree.get_mut(name) {
        p.value = value;
    }
}

fn residual_forward<T: Element>(
    ctx: &mut ForwardCtx<'_, T>,
    name: &str,
    r: &ResidualSpec,
    x: Var,
) -> Result<Var> {
    let members: HashMap<&str, LayerSpec> = r.members().into_iter().collect();
    let run = |ctx: &mut ForwardCtx<'_, T>, sub: &str, input: Var| -> Result<Var> {
        layer_forward(ctx, &format!("{name}.{sub}"), &members[sub], input)
    };
    match r.style {
        BlockStyle::Bottleneck => {
            let mut h = run(ctx, "conv1", x)?;
            h = run(ctx, "bn1", h)?;
            h = ctx.graph.relu(h);
            h = run(ctx, "conv2", h)?;
            h = run(ctx, "bn2", h)?;
            h = ctx.graph.relu(h);
            h = run(ctx, "conv3", h)?;
            h = run(ctx, "bn3", h)?;
            let shortcut = if r.has_projection() {
                let s = run(ctx, "downsample.0", x)?;
                run(ctx, "downsample.1", s)?
            } else {
                x
            };
            let sum = ctx.graph.add(h, shortcut)?;
            Ok(ctx.graph.relu(sum))
        }
        BlockStyle::PreActBasic => {
            let mut a = run(ctx, "bn1", x)?;
            a = ctx.graph.relu(a);
            let mut h = run(ctx, "conv1", a)?;
            h = run(ctx, "bn2", h)?;
            h = ctx.graph.relu(h);
            h = run(ctx, "conv2", h)?;
            let shortcut = if r.has_projection() {
                run(ctx, "shortcut", a)?
            } else {
                x
            };
            ctx.graph.add(h, shortcut)
        }
    }
}
