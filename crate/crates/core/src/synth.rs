//! Procedural shape datasets used as offline fixtures.
//!
//! Variant A draws ten filled or outlined shapes on a flat noisy background.
//! Variant B reuses the same shape vocabulary under a different rendering
//! (smaller shapes, gradient backgrounds, heavier noise) with permuted labels,
//! so features learned on A are useful but the label mapping is not.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{write_ppm, Dataset, Item, RgbImage};
use crate::error::{Error, Result};
use crate::rng::{mix_seed, SplitMix64};

pub const NUM_SHAPES: usize = 10;
/// Sorted, so class ids match directory order when a written tree is reloaded.
pub const SHAPE_NAMES: [&str; NUM_SHAPES] = [
    "cross", "diamond", "disk", "dots", "frame", "half_disk", "plus", "ring", "square", "triangle",
];
/// Maximum centre offset as a fraction of the image side.
pub const JITTER: f64 = 0.12;
/// Variant B class `c` renders shape `B_PERMUTATION[c]`.
pub const B_PERMUTATION: [usize; NUM_SHAPES] = [7, 3, 9, 0, 5, 8, 1, 4, 2, 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub variant: Variant,
    pub per_class: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    64
}

impl SynthSpec {
    pub fn new(variant: Variant, per_class: usize, seed: u64) -> Self {
        Self {
            variant,
            per_class,
            size: default_size(),
            seed,
        }
    }
}

pub fn class_names(variant: Variant) -> Vec<String> {
    match variant {
        Variant::A => SHAPE_NAMES.iter().map(|s| s.to_string()).collect(),
        Variant::B => (0..NUM_SHAPES).map(|c| format!("pattern_{c}")).collect(),
    }
}

fn inside(shape: usize, u: f64, v: f64, r: f64) -> bool {
    let d = (u * u + v * v).sqrt();
    let (au, av) = (u.abs(), v.abs());
    match SHAPE_NAMES.get(shape).copied().unwrap_or_default() {
        "disk" => d < r,
        "ring" => d < r && d > 0.6 * r,
        "square" => au.max(av) < 0.8 * r,
        "diamond" => au + av < r,
        // apex up, base at v = 0.6r
        "triangle" => v < 0.6 * r && v > -r && au < (v + r) * 0.6,
        "plus" => (au < 0.28 * r && av < r) || (av < 0.28 * r && au < r),
        "cross" => {
            let (p, q) = ((u + v).abs() / 2f64.sqrt(), (u - v).abs() / 2f64.sqrt());
            (p < 0.28 * r && q < r) || (q < 0.28 * r && p < r)
        }
        "frame" => au.max(av) < 0.85 * r && au.max(av) > 0.55 * r,
        "half_disk" => d < r && v > 0.0,
        "dots" => {
            let off = 0.55 * r;
            let a = ((u - off).powi(2) + v * v).sqrt();
            let b = ((u + off).powi(2) + v * v).sqrt();
            a < 0.4 * r || b < 0.4 * r
        }
        _ => false,
    }
}

fn colour(rng: &mut SplitMix64) -> [f64; 3] {
    [rng.uniform(0.0, 255.0), rng.uniform(0.0, 255.0), rng.uniform(0.0, 255.0)]
}

fn luma(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Foreground colour with at least `min` luma contrast against `bg`.
fn contrasting(rng: &mut SplitMix64, bg: &[f64; 3], min: f64) -> [f64; 3] {
    loop {
        let c = colour(rng);
        if (luma(&c) - luma(bg)).abs() >= min {
            return c;
        }
    }
}

/// Renders one sample of `shape` in the style of `variant`.
pub fn render(variant: Variant, shape: usize, size: usize, rng: &mut SplitMix64) -> RgbImage {
    let s = size as f64;
    let (r, noise) = match variant {
        Variant::A => (rng.uniform(0.18, 0.32) * s, 20.0),
        Variant::B => (rng.uniform(0.15, 0.26) * s, 35.0),
    };
    let jitter = (JITTER * s).min(0.5 * s - r - 1.0).max(0.0);
    let cx = 0.5 * s + rng.uniform(-jitter, jitter);
    let cy = 0.5 * s + rng.uniform(-jitter, jitter);
    let bg0 = colour(rng);
    let bg1 = match variant {
        Variant::A => bg0,
        Variant::B => colour(rng),
    };
    let mid = [0, 1, 2].map(|i| 0.5 * (bg0[i] + bg1[i]));
    let fg = contrasting(rng, &mid, 90.0);
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let t = (x + y) as f64 / (2.0 * s);
            let on = inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            for ch in 0..3 {
                let base = if on { fg[ch] } else { bg0[ch] * (1.0 - t) + bg1[ch] * t };
                let v = base + rng.uniform(-noise, noise);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(size, size, pixels).expect("buffer sized to dimensions")
}

fn shape_of(variant: Variant, class: usize) -> usize {
    match variant {
        Variant::A => class,
        Variant::B => B_PERMUTATION[class],
    }
}

/// Sample `i` of class `c`; depends only on (seed, variant, c, i).
pub fn sample(spec: &SynthSpec, class: usize, i: usize) -> RgbImage {
    let tag = match spec.variant {
        Variant::A => 0xA,
        Variant::B => 0xB,
    };
    let mut rng = SplitMix64::new(mix_seed(spec.seed ^ tag, class as u64, i as u64));
    render(spec.variant, shape_of(spec.variant, class), spec.size, &mut rng)
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    if spec.size < 16 {
        return Err(Error::Config(format!("image size must be at least 16, got {}", spec.size)));
    }
    Ok(())
}

/// In-memory dataset with `Class/NNNNN.ppm` item paths.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    validate(spec)?;
    generate_counts(spec, &[spec.per_class; NUM_SHAPES])
}

/// Splits `total` samples over the classes as evenly as possible, earlier classes first.
pub fn even_counts(total: usize) -> [usize; NUM_SHAPES] {
    std::array::from_fn(|c| total / NUM_SHAPES + usize::from(c < total % NUM_SHAPES))
}

/// Like [`generate`] with an explicit per-class count (`per_class` is ignored).
pub fn generate_counts(spec: &SynthSpec, counts: &[usize; NUM_SHAPES]) -> Result<Dataset> {
    validate(&SynthSpec { per_class: 1, ..spec.clone() })?;
    let classes = class_names(spec.variant);
    let mut items = Vec::with_capacity(counts.iter().sum());
    for (c, name) in classes.iter().enumerate() {
        for i in 0..counts[c] {
            items.push(Item {
                path: format!("{name}/{i:05}.ppm"),
                label: c,
                image: Arc::new(sample(spec, c, i)),
            });
        }
    }
    Dataset::from_items(classes, items)
}

/// Writes the dataset as a PPM directory tree under `root`.
pub fn write_tree(spec: &SynthSpec, root: &Path) -> Result<Dataset> {
    write_dataset(&generate(spec)?, root)
}

/// Writes any in-memory dataset as `root/Class/file.ppm`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<Dataset> {
    let ds = ds.clone();
    for class in ds.classes() {
        let dir = root.join(class);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for item in ds.items() {
        write_ppm(&root.join(&item.path), &item.image)?;
    }
    Ok(ds)
}
