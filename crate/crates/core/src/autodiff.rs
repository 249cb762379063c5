//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Nodes are
//! appended in evaluation order, so index order is a topological order and
//! backward is a single reverse sweep. [`Var`] is a cheap handle into the
//! graph.
//!
//! Gradient semantics:
//! - `backward` seeds the root with 1 and sums contributions over all paths.
//! - Calling `backward` again without [`Graph::zero_grads`] accumulates into
//!   the stored gradients. Each sweep propagates only its own contributions,
//!   so two sweeps yield exactly twice the gradient of one.
//! - Nothing resets gradients implicitly.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{gemm, Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Spatial geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Output extent of a strided, zero-padded window: `floor((size + 2·pad − k)/stride) + 1`.
pub fn window_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || size + 2 * pad < kernel {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: T,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Geom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    LogSoftmax {
        a: Var,
    },
    Nll {
        a: Var,
        targets: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Per-channel statistics from a batch-norm forward pass in batch-statistics mode.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance, the quantity blended into running statistics.
    pub var_unbiased: Vec<T>,
}

/// Tape of traced values.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Moves the value out of the graph, leaving a placeholder. Intended for
    /// the final output of a pass whose graph is about to be dropped.
    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(T::zero()))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise -------------------------------------------------------

    /// Binary elementwise op. Shapes must be equal, or one operand must be a
    /// single element or a suffix of the other's shape (bias-style broadcast).
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let out_shape = if sa == sb || broadcasts_into(sb, sa) {
            sa.to_vec()
        } else if broadcasts_into(sa, sb) {
            sb.to_vec()
        } else {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
            };
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        };
        let n: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (da.len(), db.len());
        let data: Vec<T> = (0..n)
            .map(|i| {
                let (x, y) = (da[i % la], db[i % lb]);
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(out_shape, data), rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Scale { a, s })
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v + s);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Relu { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean { a })
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape { a }))
    }

    /// Collapses all but the first dimension: `[N, …] → [N, F]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape();
        let n = shape[0];
        let f = shape[1..].iter().product::<usize>().max(1);
        self.reshape(a, [n, f])
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[M×K] · [K×N] → [M×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            T::one(),
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMul { a, b }))
    }

    /// Fully connected layer `x·wᵀ + b` with `x: [N×in]`, `w: [out×in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (n, fin, fout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [fout] {
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![fout],
                    rhs: bias.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            false,
            true,
            n,
            fout,
            fin,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            beta,
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(Tensor::from_parts(vec![n, fout], out), rg, Op::Linear { x, w, b }))
    }

    // ---- convolution and pooling -------------------------------------------

    /// 2-D cross-correlation (no kernel flip) with zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.value(x).shape(), self.value(w).shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let (Some(oh), Some(ow)) = (
            window_out(h, kh, stride, padding),
            window_out(wd, kw, stride, padding),
        ) else {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    wd + 2 * padding
                ),
            ));
        };
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![o],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }
        let geom = Geom {
            n,
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let out = conv_forward(
            &geom,
            o,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![n, o, oh, ow], out),
            rg,
            Op::Conv2d { x, w, b, geom },
        ))
    }

    /// Max pooling over `kernel×kernel` windows. Padded cells never win.
    /// Backward routes each window's gradient to its first maximum in
    /// row-major window order.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(Error::invalid("maxpool2d", format!("expected rank-4 input, got {sx:?}")));
        }
        if stride == 0 || kernel == 0 {
            return Err(Error::invalid("maxpool2d", "kernel and stride must be positive"));
        }
        if padding * 2 > kernel {
            return Err(Error::invalid("maxpool2d", "padding exceeds half the kernel"));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (Some(oh), Some(ow)) = (
            window_out(h, kernel, stride, padding),
            window_out(w, kernel, stride, padding),
        ) else {
            return Err(Error::invalid(
                "maxpool2d",
                format!("kernel {kernel} exceeds spatial extent {h}x{w}"),
            ));
        };
        let input = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            let v = input[idx];
                            match best {
                                Some((bv, _)) if !(v > bv) => {}
                                _ => best = Some((v, idx)),
                            }
                        }
                    }
                    let (v, idx) = best.expect("window overlaps input");
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            rg,
            Op::MaxPool { x, argmax },
        ))
    }

    /// Mean over spatial dimensions: `[N×C×H×W] → [N×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(Error::invalid(
                "global_avg_pool",
                format!("expected rank-4 input, got {sx:?}"),
            ));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        let inv = T::of(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), rg, Op::GlobalAvgPool { x }))
    }

    // ---- normalization -----------------------------------------------------

    fn check_bn(&self, x: Var, params: &[Var]) -> Result<(usize, usize, usize)> {
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(Error::invalid("batchnorm2d", format!("expected rank-4 input, got {sx:?}")));
        }
        let c = sx[1];
        for &p in params {
            if self.value(p).shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batchnorm2d",
                    lhs: sx.to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        Ok((sx[0], c, sx[2] * sx[3]))
    }

    /// Batch normalization using the batch's own per-channel statistics
    /// (biased variance for normalization). Returns the statistics so the
    /// caller can blend them into running averages.
    pub fn batchnorm2d_batch(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, hw) = self.check_bn(x, &[gamma, beta])?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::invalid(
                "batchnorm2d",
                "batch statistics need at least two values per channel",
            ));
        }
        let data = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![0.0f64; c];
        // statistics accumulate in f64 so a constant channel centers to exactly zero
        for ch in 0..c {
            let mut s = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                s += data[off..off + hw].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();
            }
            let mu = s / m as f64;
            let mut ss = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for &v in &data[off..off + hw] {
                    let d = v.to_f64().unwrap_or(f64::NAN) - mu;
                    ss += d * d;
                }
            }
            mean[ch] = T::of(mu);
            var[ch] = ss;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&ss| T::of(1.0 / (ss / m as f64 + eps).sqrt()))
            .collect();
        let var_unbiased: Vec<T> = var.iter().map(|&ss| T::of(ss / (m - 1) as f64)).collect();
        let var = self.bn_apply(x, gamma, beta, &mean, inv_std, true);
        Ok((
            var,
            BatchStats {
                mean,
                var_unbiased,
            },
        ))
    }

    /// Batch normalization with fixed statistics (running mean and variance).
    pub fn batchnorm2d_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.check_bn(x, &[gamma, beta])?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d running stats",
                lhs: vec![c],
                rhs: vec![mean.len(), var.len()],
            });
        }
        let inv_std = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, mean, inv_std, false))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (c, hw) = (shape[1], shape[2] * shape[3]);
        let data = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for (p, (src, (xh, dst))) in data
            .chunks(hw)
            .zip(xhat.chunks_mut(hw).zip(out.chunks_mut(hw)))
            .enumerate()
        {
            let ch = p % c;
            for ((&v, xh), o) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                *xh = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *xh + b[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    // ---- regularization and losses -----------------------------------------

    /// Inverted dropout: zero each element with probability `p`, scale survivors
    /// by `1/(1−p)`. The mask is a pure function of `seed`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout", format!("p must be in [0, 1), got {p}")));
        }
        let keep_scale = T::of(1.0 / (1.0 - p));
        let mut rng = SplitMix64::new(seed);
        let src = self.value(a);
        let mask: Vec<T> = (0..src.len())
            .map(|_| {
                if rng.next_f64() >= p {
                    keep_scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let data: Vec<T> = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = src.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Dropout { a, mask }))
    }

    /// Row-wise log-softmax over the last dimension of a rank-2 tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.rank() != 2 {
            return Err(Error::invalid(
                "log_softmax",
                format!("expected [N×K], got {:?}", src.shape()),
            ));
        }
        let k = src.shape()[1];
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            out.extend(row.iter().map(|&v| v - lse));
        }
        let shape = src.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::LogSoftmax { a }))
    }

    /// Mean negative log-likelihood of `targets` under row log-probabilities.
    pub fn nll_loss(&mut self, logprobs: Var, targets: &[usize]) -> Result<Var> {
        let src = self.value(logprobs);
        if src.rank() != 2 || src.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "nll_loss",
                lhs: src.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let k = src.shape()[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(
                "nll_loss",
                format!("target {t} out of range for {k} classes"),
            ));
        }
        let total: T = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -src.data()[i * k + t])
            .sum();
        let loss = total / T::of(targets.len() as f64);
        let rg = self.rg(&[logprobs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Nll {
                a: logprobs,
                targets: targets.to_vec(),
            },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d(root)/d(node) to every ancestor that requires a gradient,
    /// adding into any gradient already stored.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape();
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(shape.to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut fresh: Vec<Option<Tensor<T>>> = Vec::new();
        fresh.resize_with(root.0 + 1, || None);
        fresh[root.0] = Some(Tensor::ones(shape.to_vec()));

        for i in (0..=root.0).rev() {
            let Some(g) = fresh[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut fresh)?;
            match &mut self.nodes[i].grad {
                Some(existing) => existing.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, fresh: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a), self.value(b));
                if wants(a) {
                    let mut ga = vec![T::zero(); va.len()];
                    let la = va.len();
                    for (k, &gk) in g.data().iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gk,
                            BinaryKind::Mul => gk * vb.data()[k % vb.len()],
                        };
                        ga[k % la] = ga[k % la] + d;
                    }
                    accumulate(fresh, a, Tensor::from_parts(va.shape().to_vec(), ga))?;
                }
                if wants(b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    let lb = vb.len();
                    for (k, &gk) in g.data().iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => gk,
                            BinaryKind::Sub => -gk,
                            BinaryKind::Mul => gk * va.data()[k % va.len()],
                        };
                        gb[k % lb] = gb[k % lb] + d;
                    }
                    accumulate(fresh, b, Tensor::from_parts(vb.shape().to_vec(), gb))?;
                }
            }
            Op::Scale { a, s } => {
                let s = *s;
                accumulate(fresh, *a, g.map(|v| v * s))?;
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(fresh, *a, Tensor::from_parts(shape, g.data().to_vec()))?;
            }
            Op::Relu { a } => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(fresh, *a, Tensor::from_parts(x.shape().to_vec(), data))?;
            }
            Op::Sum { a } => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(fresh, *a, Tensor::full(shape, g.data()[0]))?;
            }
            Op::Mean { a } => {
                let x = self.value(*a);
                let v = g.data()[0] / T::of(x.len() as f64);
                accumulate(fresh, *a, Tensor::full(x.shape().to_vec(), v))?;
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if wants(a) {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(false, true, m, k, n, T::one(), g.data(), vb.data(), T::zero(), &mut ga);
                    accumulate(fresh, a, Tensor::from_parts(vec![m, k], ga))?;
                }
                if wants(b) {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(true, false, k, n, m, T::one(), va.data(), g.data(), T::zero(), &mut gb);
                    accumulate(fresh, b, Tensor::from_parts(vec![k, n], gb))?;
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, fin, fout) = (vx.shape()[0], vx.shape()[1], vw.shape()[0]);
                if wants(*x) {
                    let mut gx = vec![T::zero(); n * fin];
                    gemm(false, false, n, fin, fout, T::one(), g.data(), vw.data(), T::zero(), &mut gx);
                    accumulate(fresh, *x, Tensor::from_parts(vec![n, fin], gx))?;
                }
                if wants(*w) {
                    let mut gw = vec![T::zero(); fout * fin];
                    gemm(true, false, fout, fin, n, T::one(), g.data(), vx.data(), T::zero(), &mut gw);
                    accumulate(fresh, *w, Tensor::from_parts(vec![fout, fin], gw))?;
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    accumulate(fresh, b, Tensor::from_parts(vec![fout], gb))?;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let o = vw.shape()[0];
                let grads = conv_backward(
                    geom,
                    o,
                    vx.data(),
                    vw.data(),
                    g.data(),
                    wants(*x),
                    wants(*w),
                );
                if let Some(gx) = grads.input {
                    accumulate(fresh, *x, Tensor::from_parts(vx.shape().to_vec(), gx))?;
                }
                if let Some(gw) = grads.weight {
                    accumulate(fresh, *w, Tensor::from_parts(vw.shape().to_vec(), gw))?;
                }
                if let Some(b) = b.filter(|&b| wants(b)) {
                    let ohw = geom.oh * geom.ow;
                    let mut gb = vec![T::zero(); o];
                    for (p, plane) in g.data().chunks(ohw).enumerate() {
                        gb[p % o] = gb[p % o] + plane.iter().copied().sum::<T>();
                    }
                    accumulate(fresh, b, Tensor::from_parts(vec![o], gb))?;
                }
            }
            Op::MaxPool { x, argmax } => {
                let vx = self.value(*x);
                let mut gx = vec![T::zero(); vx.len()];
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    gx[idx] = gx[idx] + gv;
                }
                accumulate(fresh, *x, Tensor::from_parts(vx.shape().to_vec(), gx))?;
            }
            Op::GlobalAvgPool { x } => {
                let vx = self.value(*x);
                let hw = vx.shape()[2] * vx.shape()[3];
                let inv = T::of(1.0 / hw as f64);
                let mut gx = Vec::with_capacity(vx.len());
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv * inv, hw));
                }
                accumulate(fresh, *x, Tensor::from_parts(vx.shape().to_vec(), gx))?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = self.value(*x).shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (p, (gp, xp)) in g.data().chunks(hw).zip(xhat.chunks(hw)).enumerate() {
                    let ch = p % c;
                    for (&gv, &xv) in gp.iter().zip(xp) {
                        sum_g[ch] = sum_g[ch] + gv;
                        sum_gx[ch] = sum_gx[ch] + gv * xv;
                    }
                }
                if wants(*x) {
                    let mut gx = vec![T::zero(); n * c * hw];
                    let m = T::of((n * hw) as f64);
                    for (p, ((gp, xp), dst)) in g
                        .data()
                        .chunks(hw)
                        .zip(xhat.chunks(hw))
                        .zip(gx.chunks_mut(hw))
                        .enumerate()
                    {
                        let ch = p % c;
                        let k = gam[ch] * inv_std[ch];
                        if *batch_stats {
                            let mg = sum_g[ch] / m;
                            let mgx = sum_gx[ch] / m;
                            for ((&gv, &xv), d) in gp.iter().zip(xp).zip(dst.iter_mut()) {
                                *d = k * (gv - mg - xv * mgx);
                            }
                        } else {
                            for (&gv, d) in gp.iter().zip(dst.iter_mut()) {
                                *d = k * gv;
                            }
                        }
                    }
                    accumulate(fresh, *x, Tensor::from_parts(shape.to_vec(), gx))?;
                }
                if wants(*gamma) {
                    accumulate(fresh, *gamma, Tensor::from_parts(vec![c], sum_gx))?;
                }
                if wants(*beta) {
                    accumulate(fresh, *beta, Tensor::from_parts(vec![c], sum_g))?;
                }
            }
            Op::Dropout { a, mask } => {
                let shape = self.value(*a).shape().to_vec();
                let data = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(fresh, *a, Tensor::from_parts(shape, data))?;
            }
            Op::LogSoftmax { a } => {
                let y = &node.value;
                let k = y.shape()[1];
                let mut gx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(k).zip(g.data().chunks(k)) {
                    let s: T = gr.iter().copied().sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| gv - yv.exp() * s));
                }
                accumulate(fresh, *a, Tensor::from_parts(y.shape().to_vec(), gx))?;
            }
            Op::Nll { a, targets } => {
                let shape = self.value(*a).shape().to_vec();
                let k = shape[1];
                let scale = -g.data()[0] / T::of(targets.len() as f64);
                let mut gx = vec![T::zero(); shape[0] * k];
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * k + t] = scale;
                }
                accumulate(fresh, *a, Tensor::from_parts(shape, gx))?;
            }
        }
        Ok(())
    }
}

fn broadcasts_into(small: &[usize], big: &[usize]) -> bool {
    small.iter().product::<usize>() == 1 || (small.len() <= big.len() && big.ends_with(small))
}

fn accumulate<T: Element>(fresh: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut fresh[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

// ---- im2col kernels --------------------------------------------------------

fn is_pointwise(g: &Geom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

/// Unfolds one `[C×H×W]` sample into `[C·kh·kw × oh·ow]` columns.
/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies inside `0..w`.
fn valid_cols(g: &Geom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx {
        (g.pad - kx).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(g: &Geom, src: &[T], cols: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&srow[first..first + (hi - lo)]);
                    } else {
                        for (d, s) in line[lo..hi].iter_mut().zip(srow[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
fn col2im<T: Element>(g: &Geom, cols: &[T], dst: &mut [T]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, &v) in drow[first..].iter_mut().step_by(g.stride).zip(line) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Element>(g: &Geom, o: usize, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (chw, ohw) = (g.c * g.h * g.w, g.oh * g.ow);
    let ckk = g.c * g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * o * ohw];
    let mut cols = if is_pointwise(g) {
        Vec::new()
    } else {
        vec![T::zero(); ckk * ohw]
    };
    for s in 0..g.n {
        let sample = &x[s * chw..(s + 1) * chw];
        let dst = &mut out[s * o * ohw..(s + 1) * o * ohw];
        if let Some(b) = b {
            for (plane, &bv) in dst.chunks_mut(ohw).zip(b) {
                plane.fill(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let rhs = if is_pointwise(g) {
            sample
        } else {
            im2col(g, sample, &mut cols);
            &cols
        };
        gemm(false, false, o, ohw, ckk, T::one(), w, rhs, beta, dst);
    }
    out
}

struct ConvGrads<T> {
    input: Option<Vec<T>>,
    weight: Option<Vec<T>>,
}

fn conv_backward<T: Element>(
    g: &Geom,
    o: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_input: bool,
    want_weight: bool,
) -> ConvGrads<T> {
    let (chw, ohw) = (g.c * g.h * g.w, g.oh * g.ow);
    let ckk = g.c * g.kh * g.kw;
    let pointwise = is_pointwise(g);
    let mut gx = want_input.then(|| vec![T::zero(); g.n * chw]);
    let mut gw = want_weight.then(|| vec![T::zero(); o * ckk]);
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); ckk * ohw]
    };
    for s in 0..g.n {
        let gys = &gy[s * o * ohw..(s + 1) * o * ohw];
        if let Some(gw) = gw.as_mut() {
            let sample = &x[s * chw..(s + 1) * chw];
            let cols_ref = if pointwise {
                sample
            } else {
                im2col(g, sample, &mut cols);
                &cols
            };
            gemm(false, true, o, ckk, ohw, T::one(), gys, cols_ref, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[s * chw..(s + 1) * chw];
            if pointwise {
                gemm(true, false, ckk, ohw, o, T::one(), w, gys, T::zero(), dst);
            } else {
                gemm(true, false, ckk, ohw, o, T::one(), w, gys, T::zero(), &mut cols);
                col2im(g, &cols, dst);
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
    }
}
