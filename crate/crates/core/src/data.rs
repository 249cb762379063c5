//! PPM images, directory-backed datasets, stratified splits and manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{mix_seed, SplitMix64};
use crate::tensor::Tensor;

/// 8-bit RGB image, interleaved, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != 3 * width * height {
            return Err(Error::Ppm(format!(
                "{}x{} image needs {} bytes, got {}",
                width,
                height,
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Channel-planar `[3, H, W]` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let hw = self.width * self.height;
        let mut data = vec![0.0f32; 3 * hw];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px[c] as f32 / 255.0;
            }
        }
        Tensor::new([3, self.height, self.width], data).expect("shape matches buffer")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values are clamped to [0, 1] and rounded.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Ppm(format!("expected a [3, H, W] tensor, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let d = t.data();
        let mut pixels = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                pixels.push((d[c * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Self::new(w, h, pixels)
    }
}

/// Header tokenizer: whitespace-separated, `#` comments run to end of line.
struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn token(&mut self) -> Result<&[u8]> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Ppm("header ended early".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Ppm(format!("bad {what}: {:?}", String::from_utf8_lossy(tok))))
    }
}

pub fn parse_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Ppm(format!("bad magic {found:?}, expected \"P6\"")));
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Ppm(format!("maxval {maxval} unsupported, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Ppm(format!("degenerate size {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Ppm("missing whitespace after maxval".into())),
    }
    let expected = 3 * width * height;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::Ppm(format!(
            "truncated payload: expected {expected} bytes, got {}",
            payload.len()
        )));
    }
    RgbImage::new(width, height, payload[..expected].to_vec())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    Ok(parse_ppm(bytes)?.to_tensor())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Item {
    /// `Class/file.ppm`, always `/`-separated.
    pub path: String,
    pub label: usize,
    pub image: Arc<RgbImage>,
}

/// Labelled images; classes sorted, items sorted by path within each class.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    classes: Vec<String>,
    items: Vec<Item>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<(String, PathBuf, bool)>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        let is_dir = path.is_dir();
        out.push((name, path, is_dir));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Sorted class-directory names under `root`.
pub fn class_names(root: &Path) -> Result<Vec<String>> {
    if !root.is_dir() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            msg: "not a directory".into(),
        });
    }
    let classes: Vec<String> = sorted_entries(root)?
        .into_iter()
        .filter(|e| e.2)
        .map(|e| e.0)
        .collect();
    if classes.is_empty() {
        return Err(Error::Dataset {
            path: root.to_path_buf(),
            msg: "no class directories".into(),
        });
    }
    Ok(classes)
}

impl Dataset {
    /// Reads `root/Class/*`. Every file inside a class directory must be a
    /// decodable P6 image; loose files directly under `root` are ignored.
    pub fn load(root: &Path) -> Result<Self> {
        let classes = class_names(root)?;
        let mut items = Vec::new();
        for (label, class) in classes.iter().enumerate() {
            let dir = root.join(class);
            let mut count = 0;
            for (name, path, is_dir) in sorted_entries(&dir)? {
                if is_dir {
                    continue;
                }
                let image = Arc::new(read_ppm(&path)?);
                items.push(Item {
                    path: format!("{class}/{name}"),
                    label,
                    image,
                });
                count += 1;
            }
            if count == 0 {
                return Err(Error::Dataset {
                    path: dir,
                    msg: "class directory holds no images".into(),
                });
            }
            log::debug!("{class}: {count} images");
        }
        Ok(Self {
            root: root.to_path_buf(),
            classes,
            items,
        })
    }

    /// Loads only the listed relative paths, in the given order. Class ids
    /// come from the directory layout of `root`.
    pub fn load_subset(root: &Path, paths: &[String]) -> Result<Self> {
        let classes = class_names(root)?;
        let mut items = Vec::with_capacity(paths.len());
        for rel in paths {
            let class = rel.split('/').next().unwrap_or_default();
            let label = classes.iter().position(|c| c == class).ok_or_else(|| Error::Dataset {
                path: root.join(rel),
                msg: format!("unknown class {class:?}"),
            })?;
            let image = Arc::new(read_ppm(&root.join(rel))?);
            items.push(Item {
                path: rel.clone(),
                label,
                image,
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            classes,
            items,
        })
    }

    /// In-memory dataset, e.g. for generated fixtures.
    pub fn from_items(classes: Vec<String>, items: Vec<Item>) -> Result<Self> {
        if let Some(bad) = items.iter().find(|i| i.label >= classes.len()) {
            return Err(Error::Dataset {
                path: PathBuf::from(&bad.path),
                msg: format!("label {} out of range", bad.label),
            });
        }
        Ok(Self {
            root: PathBuf::new(),
            classes,
            items,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for it in &self.items {
            counts[it.label] += 1;
        }
        counts
    }

    pub fn paths(&self) -> Vec<String> {
        self.items.iter().map(|i| i.path.clone()).collect()
    }

    /// Same classes, items picked by index in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            classes: self.classes.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.75,
            seed: 0,
            stratified: true,
        }
    }
}

/// Number of training items for a group of `n`: round half away from zero.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

/// Returns (train, val) index lists into `ds`, each in ascending order.
pub fn split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0,1), got {}",
            spec.train_fraction
        )));
    }
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let mut g = vec![Vec::new(); ds.num_classes()];
        for (i, it) in ds.items.iter().enumerate() {
            g[it.label].push(i);
        }
        for (c, members) in g.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::Dataset {
                    path: ds.root.join(&ds.classes[c]),
                    msg: format!("class {} has {} items, need at least 2", ds.classes[c], members.len()),
                });
            }
        }
        g
    } else {
        if ds.len() < 2 {
            return Err(Error::Dataset {
                path: ds.root.clone(),
                msg: "need at least 2 items to split".into(),
            });
        }
        vec![(0..ds.len()).collect()]
    };
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (g, mut members) in groups.into_iter().enumerate() {
        let mut rng = SplitMix64::new(mix_seed(spec.seed, 0, g as u64));
        rng.shuffle(&mut members);
        let cut = train_count(members.len(), spec.train_fraction);
        train.extend_from_slice(&members[..cut]);
        val.extend_from_slice(&members[cut..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn stratified_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(ds, spec)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

const DIGEST_PREFIX: &str = "# config_digest: ";

/// One relative path per line, optionally preceded by a digest comment.
pub fn write_manifest(path: &Path, paths: &[String], digest: Option<&str>) -> Result<()> {
    let mut text = String::new();
    if let Some(d) = digest {
        text.push_str(DIGEST_PREFIX);
        text.push_str(d);
        text.push('\n');
    }
    for p in paths {
        text.push_str(p);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub digest: Option<String>,
    pub paths: Vec<String>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut digest = None;
    let mut paths = Vec::new();
    for line in text.lines() {
        let line = line.trim_end();
        if let Some(d) = line.strip_prefix(DIGEST_PREFIX) {
            digest = Some(d.trim().to_string());
        } else if !line.is_empty() && !line.starts_with('#') {
            paths.push(line.to_string());
        }
    }
    Ok(Manifest { digest, paths })
}
