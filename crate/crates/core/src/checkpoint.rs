//! FTK1 tensor container.
//!
//! ```text
//! 0..4     "FTK1"
//! 4..8     header length L, u32 little-endian
//! 8..8+L   UTF-8 JSON header, space-padded so the payload starts on a 64-byte boundary
//! 8+L..    payload: f32 little-endian, row-major, each tensor at a 64-byte aligned offset
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::params::{Param, ParamTree};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"FTK1";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 8;

pub type Meta = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: Meta,
}

/// Every tensor of a file, in file order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: Meta,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes named tensors into an in-memory FTK1 image.
pub fn encode(tensors: &[(&str, &Tensor<f32>)], meta: &Meta) -> Result<Vec<u8>> {
    if tensors.is_empty() {
        return Err(Error::EmptyTree);
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        if entries.iter().any(|e: &TensorEntry| e.name == *name) {
            return Err(Error::HeaderInvalid(format!("duplicate tensor name {name}")));
        }
        let nbytes = 4 * t.len();
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            nbytes,
        });
        offset = align_up(offset + nbytes);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: DType::F32.name().to_string(),
        tensors: entries,
        meta: meta.clone(),
    };
    let mut json = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
    let padded = align_up(PREAMBLE + json.len()) - PREAMBLE;
    json.resize(padded, b' ');
    let header_len =
        u32::try_from(json.len()).map_err(|_| Error::HeaderInvalid("header exceeds 4 GiB".into()))?;
    let payload_len = header.tensors.last().map_or(0, |e| e.offset + e.nbytes);

    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    let base = out.len();
    for ((_, t), e) in tensors.iter().zip(&header.tensors) {
        out.resize(base + e.offset, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes via a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_tensors(path: &Path, tensors: &[(&str, &Tensor<f32>)], meta: &Meta) -> Result<()> {
    write_atomic(path, &encode(tensors, meta)?)
}

fn validate_entries(header: &Header) -> Result<()> {
    if header.format_version != FORMAT_VERSION {
        return Err(Error::HeaderInvalid(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    if header.dtype != DType::F32.name() {
        return Err(Error::HeaderInvalid(format!("unsupported dtype {:?}", header.dtype)));
    }
    let mut seen = std::collections::HashSet::new();
    let mut end = 0;
    for e in &header.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::HeaderInvalid(format!("duplicate tensor name {}", e.name)));
        }
        let want = e.shape.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d));
        if want != Some(e.nbytes) {
            return Err(Error::HeaderInvalid(format!(
                "{}: nbytes {} does not match shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        if e.offset % ALIGN != 0 {
            return Err(Error::HeaderInvalid(format!(
                "{}: offset {} not {ALIGN}-byte aligned",
                e.name, e.offset
            )));
        }
        if e.offset < end {
            return Err(Error::HeaderInvalid(format!(
                "{}: offset {} overlaps or precedes previous tensor ending at {end}",
                e.name, e.offset
            )));
        }
        end = e.offset + e.nbytes;
    }
    Ok(())
}

/// Parses and validates an FTK1 image.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated {
            expected: PREAMBLE,
            actual: bytes.len(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload_start = PREAMBLE + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Truncated {
            expected: payload_start,
            actual: bytes.len(),
        });
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE..payload_start]).map_err(|e| Error::HeaderJson(e.to_string()))?;
    let header: Header = serde_json::from_str(text).map_err(|e| Error::HeaderJson(e.to_string()))?;
    if payload_start % ALIGN != 0 {
        return Err(Error::HeaderInvalid(format!(
            "payload starts at byte {payload_start}, not {ALIGN}-byte aligned"
        )));
    }
    validate_entries(&header)?;
    let payload = &bytes[payload_start..];
    let needed = header.tensors.last().map_or(0, |e| e.offset + e.nbytes);
    if payload.len() < needed {
        return Err(Error::Truncated {
            expected: payload_start + needed,
            actual: bytes.len(),
        });
    }
    let mut tensors = IndexMap::with_capacity(header.tensors.len());
    for e in header.tensors {
        let raw = &payload[e.offset..e.offset + e.nbytes];
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}

pub fn read_tensors(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads only the JSON header.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated {
            expected: PREAMBLE,
            actual: bytes.len(),
        });
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = PREAMBLE + header_len;
    if bytes.len() < end {
        return Err(Error::Truncated {
            expected: end,
            actual: bytes.len(),
        });
    }
    let text = std::str::from_utf8(&bytes[PREAMBLE..end]).map_err(|e| Error::HeaderJson(e.to_string()))?;
    serde_json::from_str(text).map_err(|e| Error::HeaderJson(e.to_string()))
}

fn f32_view<T: Element>(tree: &ParamTree<T>) -> Result<Vec<(String, Tensor<f32>)>> {
    if T::DTYPE != DType::F32 {
        return Err(Error::UnsupportedDtype(T::DTYPE.name()));
    }
    if tree.is_empty() {
        return Err(Error::EmptyTree);
    }
    // reinterpret bits rather than cast, so NaN payloads survive
    tree.iter()
        .map(|(n, p)| {
            let data = p.value.data().iter().map(|v| f32::from_bits(v.to_bits_u64() as u32)).collect();
            Ok((n.to_string(), Tensor::new(p.value.shape().to_vec(), data)?))
        })
        .collect()
}

/// Saves every tensor of an f32 tree. f64 trees are rejected rather than downcast.
pub fn save_checkpoint<T: Element>(tree: &ParamTree<T>, meta: &Meta, path: &Path) -> Result<()> {
    let owned = f32_view(tree)?;
    let refs: Vec<(&str, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_tensors(path, &refs, meta)
}

pub fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub tree: ParamTree<f32>,
    pub meta: Meta,
    /// Names present in the file but absent from the expected tree.
    pub extra: Vec<String>,
}

/// Loads a checkpoint. With `expected`, every expected name must be present
/// with an identical shape; the expected tree's structure (order, kinds,
/// trainability) is kept and only values are replaced. Without, the file
/// defines the tree and `running_*` tensors become buffers.
pub fn load_checkpoint(path: &Path, expected: Option<&ParamTree<f32>>) -> Result<Loaded> {
    let ck = read_tensors(path)?;
    match expected {
        None => {
            let mut tree = ParamTree::new();
            for (name, t) in ck.tensors {
                let p = if is_buffer_name(&name) {
                    Param::buffer(t)
                } else {
                    Param::weight(t)
                };
                tree.insert(name, p)?;
            }
            Ok(Loaded {
                tree,
                meta: ck.meta,
                extra: Vec::new(),
            })
        }
        Some(exp) => {
            for (name, p) in exp.iter() {
                match ck.tensors.get(name) {
                    None => return Err(Error::MissingTensor(name.to_string())),
                    Some(t) if t.shape() != p.value.shape() => {
                        return Err(Error::CheckpointShape {
                            name: name.to_string(),
                            expected: p.value.shape().to_vec(),
                            found: t.shape().to_vec(),
                        })
                    }
                    Some(_) => {}
                }
            }
            let extra: Vec<String> = ck
                .tensors
                .keys()
                .filter(|k| exp.get(k).is_none())
                .cloned()
                .collect();
            for name in &extra {
                log::warn!("{}: ignoring extra tensor {name}", path.display());
            }
            let mut tree = exp.clone();
            for (name, p) in tree.iter_mut() {
                p.value = ck.tensors[name].clone();
                p.grad = None;
            }
            Ok(Loaded {
                tree,
                meta: ck.meta,
                extra,
            })
        }
    }
}

/// Replaces the values in `tree` from the checkpoint at `path`.
pub fn load_into(tree: &mut ParamTree<f32>, path: &Path) -> Result<Loaded> {
    let loaded = load_checkpoint(path, Some(tree))?;
    *tree = loaded.tree.clone();
    Ok(loaded)
}

/// Loads only the tensors whose names start with `prefix` (e.g. an imported
/// backbone into a model with a different head). Shapes must match exactly.
pub fn load_prefix(tree: &mut ParamTree<f32>, path: &Path, prefix: &str) -> Result<usize> {
    let ck = read_tensors(path)?;
    let mut staged = Vec::new();
    for (name, p) in tree.iter().filter(|(n, _)| n.starts_with(prefix)) {
        let t = ck
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape() != p.value.shape() {
            return Err(Error::CheckpointShape {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        staged.push((name.to_string(), t.clone()));
    }
    let n = staged.len();
    for (name, t) in staged {
        tree.get_mut(&name).expect("name taken from tree").value = t;
    }
    Ok(n)
}

const ADAM_PREFIX: &str = "adam.";

/// Optimizer state as a sibling FTK1 file: `adam.m.<param>` / `adam.v.<param>`.
pub fn save_adam(adam: &Adam<f32>, meta: &Meta, path: &Path) -> Result<()> {
    let names: Vec<(String, String, &Moments<f32>)> = adam
        .moments()
        .map(|(n, m)| (format!("{ADAM_PREFIX}m.{n}"), format!("{ADAM_PREFIX}v.{n}"), m))
        .collect();
    let mut refs: Vec<(&str, &Tensor<f32>)> = Vec::new();
    for (mn, vn, m) in &names {
        refs.push((mn, &m.m));
        refs.push((vn, &m.v));
    }
    let mut meta = meta.clone();
    meta.insert("adam.step".into(), adam.step_count().to_string());
    let cfg = serde_json::to_string(&adam.config).map_err(|e| Error::Serde(e.to_string()))?;
    meta.insert("adam.config".into(), cfg);
    write_tensors(path, &refs, &meta)
}

pub fn load_adam(path: &Path) -> Result<Adam<f32>> {
    let ck = read_tensors(path)?;
    let bad = |m: &str| Error::HeaderInvalid(format!("optimizer state: {m}"));
    let step: u64 = ck
        .meta
        .get("adam.step")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing adam.step"))?;
    let config: AdamConfig = ck
        .meta
        .get("adam.config")
        .and_then(|s| serde_json::from_str(s).ok())
        .ok_or_else(|| bad("missing adam.config"))?;
    let mut moments = Vec::new();
    for (name, m) in &ck.tensors {
        let Some(param) = name.strip_prefix("adam.m.") else {
            continue;
        };
        let v = ck
            .tensors
            .get(&format!("{ADAM_PREFIX}v.{param}"))
            .ok_or_else(|| Error::MissingTensor(format!("{ADAM_PREFIX}v.{param}")))?;
        moments.push((
            param.to_string(),
            Moments {
                m: m.clone(),
                v: v.clone(),
            },
        ));
    }
    Ok(Adam::from_parts(config, step, moments))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> ParamTree<f32> {
        let mut t = ParamTree::new();
        t.insert("features.0.weight", Param::weight(Tensor::new([2, 3], vec![1.0, -2.0, 3.5, 0.0, -0.0, 1e-20]).unwrap()))
            .unwrap();
        t.insert("features.1.running_mean", Param::buffer(Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap()))
            .unwrap();
        t.insert("head.1.bias", Param::weight(Tensor::new([1], vec![f32::MIN_POSITIVE]).unwrap()))
            .unwrap();
        t
    }

    #[test]
    fn layout_is_aligned() {
        let t = tree();
        let owned = f32_view(&t).unwrap();
        let refs: Vec<(&str, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = encode(&refs, &Meta::new()).unwrap();
        assert_eq!(&bytes[..4], b"FTK1");
        let l = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!((8 + l) % 64, 0);
        let header: Header = serde_json::from_slice(&bytes[8..8 + l]).unwrap();
        assert_eq!(header.tensors[1].offset, 64);
        assert_eq!(header.tensors[0].nbytes, 24);
        let ck = decode(&bytes).unwrap();
        for (name, p) in t.iter() {
            assert!(ck.tensors[name].bit_eq(&p.value));
        }
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(decode(b"XXXX\0\0\0\0"), Err(Error::BadMagic { found }) if found == b"XXXX"));
        let mut bad_json = b"FTK1".to_vec();
        bad_json.extend(4u32.to_le_bytes());
        bad_json.extend(b"{no}");
        assert!(matches!(decode(&bad_json), Err(Error::HeaderJson(_))));
        let t = tree();
        let owned = f32_view(&t).unwrap();
        let refs: Vec<(&str, &Tensor<f32>)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let bytes = encode(&refs, &Meta::new()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn f64_and_empty_trees_rejected() {
        let mut t = ParamTree::<f64>::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ftk1");
        assert!(matches!(save_checkpoint(&t, &Meta::new(), &path), Err(Error::UnsupportedDtype("f64"))));
        t.insert("a", Param::weight(Tensor::ones([1]))).unwrap();
        assert!(matches!(save_checkpoint(&t, &Meta::new(), &path), Err(Error::UnsupportedDtype(_))));
        assert!(matches!(
            save_checkpoint(&ParamTree::<f32>::new(), &Meta::new(), &path),
            Err(Error::EmptyTree)
        ));
        assert!(!path.exists());
    }
}
