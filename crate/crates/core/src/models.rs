//! Architecture builders, head replacement, freezing and feature extraction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::{BlockStyle, ForwardCtx, LayerSpec, Mode, ResidualSpec, Sequential, BN_EPS, BN_MOMENTUM, DEFAULT_DROPOUT};
use crate::params::ParamTree;
use crate::tensor::{Element, Tensor};

pub const BACKBONE_PREFIX: &str = "features.";
pub const HEAD_PREFIX: &str = "head.";
pub const HEAD_HIDDEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vgg16,
    MiniVgg,
    WideResnet,
    MiniWideResnet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Vgg16 => "vgg16",
            Arch::MiniVgg => "mini_vgg",
            Arch::WideResnet => "wide_resnet",
            Arch::MiniWideResnet => "mini_wide_resnet",
        }
    }

    fn default_input(self) -> usize {
        match self {
            Arch::Vgg16 | Arch::WideResnet => 224,
            Arch::MiniVgg | Arch::MiniWideResnet => 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default)]
    pub input_size: Option<usize>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width_factor: usize,
    #[serde(default)]
    pub stage_blocks: Option<Vec<usize>>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_classes() -> usize {
    10
}
fn default_width() -> usize {
    2
}
fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            input_size: None,
            num_classes: default_classes(),
            width_factor: default_width(),
            stage_blocks: None,
            dropout: DEFAULT_DROPOUT,
        }
    }

    pub fn with_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }

    pub fn input(&self) -> usize {
        self.input_size.unwrap_or(self.arch.default_input())
    }

    pub fn blocks(&self) -> Vec<usize> {
        self.stage_blocks.clone().unwrap_or_else(|| match self.arch {
            Arch::WideResnet => vec![3, 4, 6, 3],
            Arch::MiniWideResnet => vec![2, 2, 2],
            _ => Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        let input = self.input();
        match self.arch {
            Arch::MiniVgg | Arch::MiniWideResnet if input != 64 => {
                return bad(format!("{} requires input_size 64, got {input}", self.arch.name()))
            }
            Arch::Vgg16 | Arch::WideResnet if input < 32 => {
                return bad(format!("{} requires input_size ≥ 32, got {input}", self.arch.name()))
            }
            _ => {}
        }
        if self.stage_blocks.is_some() && matches!(self.arch, Arch::Vgg16 | Arch::MiniVgg) {
            return bad(format!("stage_blocks does not apply to {}", self.arch.name()));
        }
        let blocks = self.blocks();
        match self.arch {
            Arch::WideResnet if blocks.len() != 4 => return bad("wide_resnet needs 4 stage block counts".into()),
            Arch::MiniWideResnet if blocks.len() != 3 => {
                return bad("mini_wide_resnet needs 3 stage block counts".into())
            }
            _ => {}
        }
        if blocks.contains(&0) {
            return bad("stage block counts must be positive".into());
        }
        if self.width_factor == 0 {
            return bad("width_factor must be at least 1".into());
        }
        Ok(())
    }
}

fn vgg(widths: &[Option<usize>]) -> Sequential {
    let mut s = Sequential::new();
    let prefix = BACKBONE_PREFIX.trim_end_matches('.');
    let mut ch = 3;
    for w in widths {
        match *w {
            Some(out) => {
                s.push_indexed(prefix, LayerSpec::conv3x3(ch, out));
                s.push_indexed(prefix, LayerSpec::Relu);
                ch = out;
            }
            None => {
                s.push_indexed(
                    prefix,
                    LayerSpec::MaxPool2d {
                        kernel: 2,
                        stride: 2,
                        padding: 0,
                    },
                );
            }
        }
    }
    s
}

const M: Option<usize> = None;

fn wide_resnet(blocks: &[usize], width: usize) -> Sequential {
    let mut s = Sequential::new();
    s.push(
        "features.conv1",
        LayerSpec::Conv2d {
            in_ch: 3,
            out_ch: 64,
            kernel: 7,
            stride: 2,
            padding: 3,
            bias: false,
        },
    );
    s.push("features.bn1", LayerSpec::batchnorm(64));
    s.push("features.relu", LayerSpec::Relu);
    s.push(
        "features.maxpool",
        LayerSpec::MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    );
    let mut in_ch = 64;
    for (stage, &n) in blocks.iter().enumerate() {
        let planes = 64 << stage;
        for b in 0..n {
            let spec = ResidualSpec {
                style: BlockStyle::Bottleneck,
                in_ch,
                mid_ch: planes * width,
                out_ch: planes * 4,
                stride: if b == 0 && stage > 0 { 2 } else { 1 },
                momentum: BN_MOMENTUM,
                eps: BN_EPS,
            };
            s.push(format!("features.layer{}.{b}", stage + 1), LayerSpec::ResidualBlock(spec));
            in_ch = planes * 4;
        }
    }
    s.push("features.avgpool", LayerSpec::GlobalAvgPool);
    s
}

fn mini_wide_resnet(blocks: &[usize], k: usize) -> Sequential {
    let mut s = Sequential::new();
    s.push(
        "features.0",
        LayerSpec::Conv2d {
            in_ch: 3,
            out_ch: 16,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        },
    );
    let mut in_ch = 16;
    for (stage, &n) in blocks.iter().enumerate() {
        let out_ch = (16 << stage) * k;
        for b in 0..n {
            let spec = ResidualSpec {
                style: BlockStyle::PreActBasic,
                in_ch,
                mid_ch: out_ch,
                out_ch,
                stride: if b == 0 && stage > 0 { 2 } else { 1 },
                momentum: BN_MOMENTUM,
                eps: BN_EPS,
            };
            s.push(format!("features.{}.{b}", stage + 1), LayerSpec::ResidualBlock(spec));
            in_ch = out_ch;
        }
    }
    let next = blocks.len() + 1;
    s.push(format!("features.{next}"), LayerSpec::batchnorm(in_ch));
    s.push(format!("features.{}", next + 1), LayerSpec::Relu);
    s.push(format!("features.{}", next + 2), LayerSpec::GlobalAvgPool);
    s
}

/// Backbone layer stack for a config (no parameters allocated).
pub fn backbone_spec(cfg: &ModelConfig) -> Result<Sequential> {
    cfg.validate()?;
    let s = match cfg.arch {
        Arch::Vgg16 => vgg(&[
            Some(64),
            Some(64),
            M,
            Some(128),
            Some(128),
            M,
            Some(256),
            Some(256),
            Some(256),
            M,
            Some(512),
            Some(512),
            Some(512),
            M,
            Some(512),
            Some(512),
            Some(512),
            M,
        ]),
        Arch::MiniVgg => vgg(&[Some(32), Some(32), M, Some(64), Some(64), M, Some(128), Some(128), M]),
        Arch::WideResnet => wide_resnet(&cfg.blocks(), cfg.width_factor),
        Arch::MiniWideResnet => mini_wide_resnet(&cfg.blocks(), cfg.width_factor),
    };
    Ok(s)
}

/// Flatten → linear(F→512) → ReLU → dropout → linear(512→K) → log-softmax.
pub fn head_spec(feature_dim: usize, num_classes: usize, dropout: f64) -> Sequential {
    let mut h = Sequential::new();
    let prefix = HEAD_PREFIX.trim_end_matches('.');
    h.push_indexed(prefix, LayerSpec::Flatten);
    h.push_indexed(
        prefix,
        LayerSpec::Linear {
            in_features: feature_dim,
            out_features: HEAD_HIDDEN,
        },
    );
    h.push_indexed(prefix, LayerSpec::Relu);
    h.push_indexed(prefix, LayerSpec::Dropout { p: dropout });
    h.push_indexed(
        prefix,
        LayerSpec::Linear {
            in_features: HEAD_HIDDEN,
            out_features: num_classes,
        },
    );
    h.push_indexed(prefix, LayerSpec::LogSoftmax);
    h
}

/// Per-sample feature width produced by a backbone.
pub fn feature_dim(backbone: &Sequential, input_size: usize) -> Result<usize> {
    let out = backbone.output_shape(&[1, 3, input_size, input_size])?;
    Ok(out[1..].iter().product())
}

/// Loss and outputs of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct StepOutput<T: Element> {
    pub loss: f64,
    /// `[N, K]` log-probabilities.
    pub logprobs: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BuiltModel<T: Element = f32> {
    pub config: ModelConfig,
    pub backbone: Sequential,
    pub head: Sequential,
    pub params: ParamTree<T>,
    backbone_frozen: bool,
    feature_dim: usize,
}

impl<T: Element> BuiltModel<T> {
    pub fn build(cfg: &ModelConfig, init_seed: u64) -> Result<Self> {
        let backbone = backbone_spec(cfg)?;
        let fdim = feature_dim(&backbone, cfg.input())?;
        let head = head_spec(fdim, cfg.num_classes, cfg.dropout);
        let mut params = ParamTree::new();
        backbone.init_params(&mut params, init_seed)?;
        head.init_params(&mut params, init_seed)?;
        Ok(Self {
            config: cfg.clone(),
            backbone,
            head,
            params,
            backbone_frozen: false,
            feature_dim: fdim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone_frozen
    }

    /// Closed-form learnable scalar count of backbone plus head.
    pub fn spec_param_count(&self) -> usize {
        self.backbone.param_count() + self.head.param_count()
    }

    /// Discards the head and installs a freshly initialized one with `k` outputs.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be at least 2, got {num_classes}")));
        }
        self.params.remove_prefix(HEAD_PREFIX);
        self.config.num_classes = num_classes;
        self.head = head_spec(self.feature_dim, num_classes, self.config.dropout);
        self.head.init_params(&mut self.params, seed)
    }

    /// Freezes every backbone weight and pins backbone batch-norm to running
    /// statistics. Returns the number of tensors frozen.
    pub fn freeze_backbone(&mut self) -> usize {
        self.backbone_frozen = true;
        self.params.set_trainable(BACKBONE_PREFIX, false)
    }

    pub fn unfreeze_backbone(&mut self) -> usize {
        self.backbone_frozen = false;
        self.params.set_trainable(BACKBONE_PREFIX, true)
    }

    fn frozen_prefix(&self) -> Option<String> {
        self.backbone_frozen.then(|| BACKBONE_PREFIX.to_string())
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let s = self.config.input();
        match images.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(Error::LayerShape {
                index: 0,
                name: self.backbone.layers[0].name.clone(),
                expected: format!("[N×3×{s}×{s}]"),
                actual: other.to_vec(),
            }),
        }
    }

    /// Full forward pass returning `[N, K]` log-probabilities.
    pub fn forward(&mut self, images: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<Tensor<T>> {
        self.check_input(images)?;
        let mut g = Graph::new();
        let frozen = self.frozen_prefix();
        let mut ctx = ForwardCtx::new(&mut g, &mut self.params, mode)
            .with_dropout_seed(dropout_seed)
            .with_frozen_bn(frozen);
        let x = ctx.graph.constant(images.clone());
        let f = self.backbone.forward(&mut ctx, x)?;
        let y = self.head.forward(&mut ctx, f)?;
        Ok(g.take_value(y))
    }

    /// Forward, NLL loss and backward; gradients are added into `params`.
    pub fn loss_and_grads(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<StepOutput<T>> {
        self.check_input(images)?;
        let mut g = Graph::new();
        let frozen = self.frozen_prefix();
        let mut ctx = ForwardCtx::new(&mut g, &mut self.params, mode)
            .with_dropout_seed(dropout_seed)
            .with_frozen_bn(frozen);
        let x = ctx.graph.constant(images.clone());
        let f = self.backbone.forward(&mut ctx, x)?;
        let y = self.head.forward(&mut ctx, f)?;
        let loss = ctx.graph.nll_loss(y, labels)?;
        ctx.graph.backward(loss)?;
        ctx.collect_grads()?;
        let loss_value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        Ok(StepOutput {
            loss: loss_value,
            logprobs: g.take_value(y),
        })
    }

    /// Head-only pass on cached `[N, F]` features.
    pub fn head_loss_and_grads(
        &mut self,
        features: &Tensor<T>,
        labels: &[usize],
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<StepOutput<T>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&mut g, &mut self.params, mode).with_dropout_seed(dropout_seed);
        let x = ctx.graph.constant(features.clone());
        let y = self.head.forward(&mut ctx, x)?;
        let loss = ctx.graph.nll_loss(y, labels)?;
        ctx.graph.backward(loss)?;
        ctx.collect_grads()?;
        let loss_value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
        Ok(StepOutput {
            loss: loss_value,
            logprobs: g.take_value(y),
        })
    }

    /// Head forward on cached features without gradients.
    pub fn head_forward(&mut self, features: &Tensor<T>, mode: Mode, dropout_seed: u64) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::new(&mut g, &mut self.params, mode).with_dropout_seed(dropout_seed);
        let x = ctx.graph.constant(features.clone());
        let y = self.head.forward(&mut ctx, x)?;
        Ok(g.take_value(y))
    }

    /// `[N, F]` backbone features in eval mode. Requires a frozen backbone so
    /// cached features cannot go stale.
    pub fn feature_extract(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.backbone_frozen {
            return Err(Error::BackboneNotFrozen);
        }
        self.check_input(images)?;
        let mut g = Graph::new();
        let frozen = self.frozen_prefix();
        let mut ctx = ForwardCtx::new(&mut g, &mut self.params, Mode::Eval).with_frozen_bn(frozen);
        let x = ctx.graph.constant(images.clone());
        let f = self.backbone.forward(&mut ctx, x)?;
        let f = ctx.graph.flatten(f)?;
        Ok(g.take_value(f))
    }
}
