//! Image augmentation ops, seeded pipelines and mini-batch assembly.
//!
//! Images are `[3, H, W]` f32 tensors. Each stochastic op draws a fixed
//! number of values from the per-sample stream whether or not it fires, so
//! toggling one op's probability never shifts the draws of later ops.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{mix_seed, SplitMix64};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
pub const DEFAULT_BATCH_SIZE: usize = 64;

fn dims(img: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::invalid("augment", format!("expected [C, H, W], got {s:?}"))),
    }
}

pub fn hflip(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks_exact(w).take(c * h) {
        out.extend(row.iter().rev());
    }
    Tensor::new([c, h, w], out)
}

pub fn vflip(img: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for y in (0..h).rev() {
            let off = (ch * h + y) * w;
            out.extend_from_slice(&src[off..off + w]);
        }
    }
    Tensor::new([c, h, w], out)
}

/// Counter-clockwise rotation by `k` quarter turns. Odd `k` swaps H and W.
pub fn rot90(img: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img)?;
    let src = img.data();
    match k % 4 {
        0 => Ok(img.clone()),
        2 => {
            let mut out = Vec::with_capacity(src.len());
            for plane in src.chunks_exact(h * w) {
                out.extend(plane.iter().rev());
            }
            Tensor::new([c, h, w], out)
        }
        q => {
            // output is w rows by h columns
            let mut out = vec![0.0f32; src.len()];
            for ch in 0..c {
                let (s, d) = (&src[ch * h * w..], &mut out[ch * h * w..]);
                for i in 0..w {
                    for j in 0..h {
                        d[i * h + j] = if q == 1 {
                            s[j * w + (w - 1 - i)]
                        } else {
                            s[(h - 1 - j) * w + i]
                        };
                    }
                }
            }
            Tensor::new([c, w, h], out)
        }
    }
}

/// Reflect-101 index (edge not repeated): -1 -> 1, n -> n-2.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and reflect padding.
pub fn gaussian_blur(img: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid("gaussian_blur", format!("sigma must be positive, got {sigma}")));
    }
    let (c, h, w) = dims(img)?;
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0f64; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..][..w];
            for x in 0..w {
                tmp[(ch * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * row[reflect(x as isize + t as isize - r, w)] as f64)
                    .sum();
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        let plane = &tmp[ch * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(t, &kv)| kv * plane[reflect(y as isize + t as isize - r, h) * w + x])
                    .sum();
                out[(ch * h + y) * w + x] = v as f32;
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Bilinear resize, pixel-center aligned (not corner aligned).
pub fn resize(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "target size must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..][..h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] as f64 * (1.0 - fx) + p[y0 * w + x1] as f64 * fx;
                let bot = p[y1 * w + x0] as f64 * (1.0 - fx) + p[y1 * w + x1] as f64 * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

fn check_std(std: &[f64; 3]) -> Result<()> {
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("normalize", format!("std must be positive, got {std:?}")));
    }
    Ok(())
}

pub fn normalize(img: &Tensor<f32>, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor<f32>> {
    check_std(std)?;
    let (c, h, w) = dims(img)?;
    if c != 3 {
        return Err(Error::invalid("normalize", format!("expected 3 channels, got {c}")));
    }
    let mut out = img.clone();
    for (ch, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let (m, s) = (mean[ch] as f32, std[ch] as f32);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(out)
}

pub fn denormalize(img: &Tensor<f32>, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor<f32>> {
    check_std(std)?;
    let (_, h, w) = dims(img)?;
    let mut out = img.clone();
    for (ch, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let (m, s) = (mean[ch] as f32, std[ch] as f32);
        plane.iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    GaussianBlur { sigma: [f64; 2], p: f64 },
    Hflip { p: f64 },
    Vflip { p: f64 },
    Rot90 { p: f64 },
    Resize { height: usize, width: usize },
    Normalize { mean: [f64; 3], std: [f64; 3] },
}

impl AugmentOp {
    pub fn is_stochastic(&self) -> bool {
        !matches!(self, AugmentOp::Resize { .. } | AugmentOp::Normalize { .. })
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("probability {p} outside [0, 1]")))
            }
        };
        match self {
            AugmentOp::GaussianBlur { sigma, p } => {
                prob(*p)?;
                if !(sigma[0] > 0.0 && sigma[0] <= sigma[1] && sigma[1].is_finite()) {
                    return Err(Error::Config(format!("bad blur sigma range {sigma:?}")));
                }
                Ok(())
            }
            AugmentOp::Hflip { p } | AugmentOp::Vflip { p } | AugmentOp::Rot90 { p } => prob(*p),
            AugmentOp::Resize { height, width } if *height == 0 || *width == 0 => {
                Err(Error::Config("resize target must be positive".into()))
            }
            AugmentOp::Resize { .. } => Ok(()),
            AugmentOp::Normalize { std, .. } => check_std(std).map_err(|e| Error::Config(e.to_string())),
        }
    }

    fn apply(&self, img: Tensor<f32>, rng: &mut SplitMix64) -> Result<Tensor<f32>> {
        match *self {
            AugmentOp::GaussianBlur { sigma, p } => {
                let fire = rng.next_f64() < p;
                let s = rng.uniform(sigma[0], sigma[1]);
                if fire {
                    gaussian_blur(&img, s)
                } else {
                    Ok(img)
                }
            }
            AugmentOp::Hflip { p } => {
                if rng.next_f64() < p {
                    hflip(&img)
                } else {
                    Ok(img)
                }
            }
            AugmentOp::Vflip { p } => {
                if rng.next_f64() < p {
                    vflip(&img)
                } else {
                    Ok(img)
                }
            }
            AugmentOp::Rot90 { p } => {
                let fire = rng.next_f64() < p;
                let k = rng.below(4) as usize;
                if fire {
                    rot90(&img, k)
                } else {
                    Ok(img)
                }
            }
            AugmentOp::Resize { height, width } => resize(&img, height, width),
            AugmentOp::Normalize { mean, std } => normalize(&img, &mean, &std),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPipeline {
    pub ops: Vec<AugmentOp>,
    pub base_seed: u64,
}

impl AugmentPipeline {
    pub fn new(ops: Vec<AugmentOp>, base_seed: u64) -> Result<Self> {
        for op in &ops {
            op.validate()?;
        }
        Ok(Self { ops, base_seed })
    }

    /// Blur, both flips, right-angle rotation, resize, normalize.
    pub fn standard(size: usize, base_seed: u64) -> Self {
        Self {
            ops: vec![
                AugmentOp::GaussianBlur {
                    sigma: [0.1, 1.0],
                    p: 0.3,
                },
                AugmentOp::Hflip { p: 0.5 },
                AugmentOp::Vflip { p: 0.5 },
                AugmentOp::Rot90 { p: 1.0 },
                AugmentOp::Resize {
                    height: size,
                    width: size,
                },
                AugmentOp::Normalize {
                    mean: IMAGENET_MEAN,
                    std: IMAGENET_STD,
                },
            ],
            base_seed,
        }
    }

    /// Resize and normalize only.
    pub fn deterministic(size: usize) -> Self {
        Self::standard(size, 0).without_stochastic()
    }

    pub fn without_stochastic(&self) -> Self {
        Self {
            ops: self.ops.iter().filter(|o| !o.is_stochastic()).cloned().collect(),
            base_seed: self.base_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ops.iter().try_for_each(AugmentOp::validate)
    }

    /// Pure function of (image, pipeline, epoch, index).
    pub fn apply(&self, img: &Tensor<f32>, epoch: u64, index: u64) -> Result<Tensor<f32>> {
        if !img.all_finite() {
            return Err(Error::NonFinite("augment input".into()));
        }
        let mut rng = SplitMix64::new(mix_seed(self.base_seed, epoch, index));
        let mut out = img.clone();
        for op in &self.ops {
            out = op.apply(out, &mut rng)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N, 3, H, W]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset positions of the samples, in batch order.
    pub indices: Vec<usize>,
}

/// Sample order for one epoch: a seeded permutation, or dataset order without a seed.
pub fn epoch_order(n: usize, shuffle_seed: Option<u64>, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        SplitMix64::new(mix_seed(seed, epoch, 0)).shuffle(&mut order);
    }
    order
}

/// Decodes and (optionally) augments one sample at dataset position `index`.
pub fn load_sample(ds: &Dataset, index: usize, epoch: u64, pipeline: Option<&AugmentPipeline>) -> Result<Tensor<f32>> {
    let img = ds.items()[index].image.to_tensor();
    match pipeline {
        Some(p) => p.apply(&img, epoch, index as u64),
        None => Ok(img),
    }
}

pub fn collate(ds: &Dataset, indices: &[usize], epoch: u64, pipeline: Option<&AugmentPipeline>) -> Result<Batch> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for &i in indices {
        let t = load_sample(ds, i, epoch, pipeline)?;
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::Dataset {
                    path: ds.root().join(&ds.items()[i].path),
                    msg: format!("image shape {:?} differs from batch shape {s:?}", t.shape()),
                })
            }
            Some(_) => {}
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![indices.len()];
    full.extend(shape.ok_or_else(|| Error::invalid("collate", "empty batch"))?);
    Ok(Batch {
        images: Tensor::new(full, data)?,
        labels: indices.iter().map(|&i| ds.items()[i].label).collect(),
        indices: indices.to_vec(),
    })
}

/// Lazily assembled batches for one epoch. The last batch may be short.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    epoch: u64,
    pipeline: Option<&'a AugmentPipeline>,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(collate(self.ds, idx, self.epoch, self.pipeline))
    }
}

pub fn batches<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
    pipeline: Option<&'a AugmentPipeline>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    Ok(Batches {
        ds,
        order: epoch_order(ds.len(), shuffle_seed, epoch),
        batch_size,
        epoch,
        pipeline,
        pos: 0,
    })
}
