use std::fs;

use ftkit_core::checkpoint::{self, Header, Meta};
use ftkit_core::error::Error;
use ftkit_core::models::{Arch, BuiltModel, ModelConfig, BACKBONE_PREFIX};
use ftkit_core::optim::{Adam, AdamConfig};
use ftkit_core::params::{Param, ParamTree};
use ftkit_core::tensor::Tensor;
use proptest::prelude::*;

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=64, 1..=4).prop_filter("keep tensors small", |s| {
        s.iter().product::<usize>() <= 1 << 14
    })
}

fn tree_strategy() -> impl Strategy<Value = ParamTree<f32>> {
    prop::collection::vec((shape_strategy(), any::<u64>(), any::<bool>()), 1..6).prop_map(|entries| {
        let mut tree = ParamTree::new();
        for (i, (shape, seed, buffer)) in entries.into_iter().enumerate() {
            let n: usize = shape.iter().product();
            // arbitrary bit patterns, including NaNs, infinities and subnormals
            let mut s = seed;
            let data = (0..n)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    f32::from_bits((s >> 32) as u32)
                })
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let (name, p) = if buffer {
                (format!("layer{i}.running_var"), Param::buffer(t))
            } else {
                (format!("layer{i}.weight"), Param::weight(t))
            };
            tree.insert(name, p).unwrap();
        }
        tree
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_bitwise(tree in tree_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ftk1");
        let mut meta = Meta::new();
        meta.insert("arch".into(), "test".into());
        checkpoint::save_checkpoint(&tree, &meta, &path).unwrap();

        let bare = checkpoint::load_checkpoint(&path, None).unwrap();
        prop_assert_eq!(&bare.meta, &meta);
        prop_assert_eq!(bare.tree.len(), tree.len());
        for ((a, pa), (b, pb)) in tree.iter().zip(bare.tree.iter()) {
            prop_assert_eq!(a, b);
            prop_assert!(pa.value.bit_eq(&pb.value));
            prop_assert_eq!(pa.kind(), pb.kind());
        }

        let typed = checkpoint::load_checkpoint(&path, Some(&tree)).unwrap();
        prop_assert!(typed.extra.is_empty());
        for ((_, pa), (_, pb)) in tree.iter().zip(typed.tree.iter()) {
            prop_assert!(pa.value.bit_eq(&pb.value));
        }

        // header invariants, checked with a generic JSON parser
        let bytes = fs::read(&path).unwrap();
        let l = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        prop_assert_eq!((8 + l) % 64, 0);
        let v: serde_json::Value = serde_json::from_slice(&bytes[8..8 + l]).unwrap();
        let h: Header = serde_json::from_value(v).unwrap();
        let mut end = 0;
        for e in &h.tensors {
            prop_assert_eq!(e.offset % 64, 0);
            prop_assert!(e.offset >= end);
            prop_assert_eq!(e.nbytes, 4 * e.shape.iter().product::<usize>());
            end = e.offset + e.nbytes;
        }
        prop_assert_eq!(bytes.len(), 8 + l + end);
    }
}

fn small_tree() -> ParamTree<f32> {
    let mut t = ParamTree::new();
    t.insert("a.weight", Param::weight(Tensor::new([4, 3], (0..12).map(|i| i as f32 * 0.5).collect()).unwrap()))
        .unwrap();
    t.insert("a.bias", Param::weight(Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()))
        .unwrap();
    t
}

#[test]
fn saves_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("1.ftk1"), dir.path().join("2.ftk1"));
    let meta: Meta = [("k".to_string(), "v".to_string())].into();
    checkpoint::save_checkpoint(&small_tree(), &meta, &p1).unwrap();
    checkpoint::save_checkpoint(&small_tree(), &meta, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    // no temp files left behind
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 2);
}

fn saved(dir: &tempfile::TempDir) -> (std::path::PathBuf, Vec<u8>) {
    let path = dir.path().join("ok.ftk1");
    checkpoint::save_checkpoint(&small_tree(), &Meta::new(), &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    (path, bytes)
}

fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let l = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut v: serde_json::Value = serde_json::from_slice(&bytes[8..8 + l]).unwrap();
    edit(&mut v);
    let mut json = serde_json::to_vec(&v).unwrap();
    assert!(json.len() <= l);
    json.resize(l, b' ');
    let mut out = bytes[..8].to_vec();
    out.extend(json);
    out.extend_from_slice(&bytes[8 + l..]);
    out
}

#[test]
fn every_error_case_is_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let (_, bytes) = saved(&dir);
    let bad = dir.path().join("bad.ftk1");
    let load = |b: &[u8]| {
        fs::write(&bad, b).unwrap();
        checkpoint::load_checkpoint(&bad, None)
    };

    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"XXXX");
    let err = load(&magic).unwrap_err();
    assert!(matches!(&err, Error::BadMagic { found } if found == b"XXXX"));
    assert!(err.to_string().contains("\"XXXX\""), "{err}");

    let mut json = bytes.clone();
    json[8] = b'!';
    assert!(matches!(load(&json), Err(Error::HeaderJson(_))));

    assert!(matches!(load(&bytes[..bytes.len() - 4]), Err(Error::Truncated { .. })));
    assert!(matches!(load(&bytes[..6]), Err(Error::Truncated { .. })));
    assert!(matches!(load(&bytes[..40]), Err(Error::Truncated { .. })));

    let misaligned = rewrite_header(&bytes, |v| v["tensors"][1]["offset"] = 52.into());
    assert!(matches!(load(&misaligned), Err(Error::HeaderInvalid(m)) if m.contains("aligned")));
    let overlap = rewrite_header(&bytes, |v| v["tensors"][1]["offset"] = 0.into());
    assert!(matches!(load(&overlap), Err(Error::HeaderInvalid(m)) if m.contains("overlap")));
    let nbytes = rewrite_header(&bytes, |v| v["tensors"][0]["nbytes"] = 44.into());
    assert!(matches!(load(&nbytes), Err(Error::HeaderInvalid(_))));
    let dup = rewrite_header(&bytes, |v| v["tensors"][1]["name"] = "a.weight".into());
    assert!(matches!(load(&dup), Err(Error::HeaderInvalid(m)) if m.contains("duplicate")));
    let dtype = rewrite_header(&bytes, |v| v["dtype"] = "f64".into());
    assert!(matches!(load(&dtype), Err(Error::HeaderInvalid(_))));
    let version = rewrite_header(&bytes, |v| v["format_version"] = 2.into());
    assert!(matches!(load(&version), Err(Error::HeaderInvalid(_))));

    assert!(matches!(
        checkpoint::load_checkpoint(&dir.path().join("missing.ftk1"), None),
        Err(Error::Io { .. })
    ));
}

#[test]
fn expected_tree_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = saved(&dir);

    let mut wrong = small_tree();
    wrong.get_mut("a.bias").unwrap().value = Tensor::zeros([5]);
    match checkpoint::load_checkpoint(&path, Some(&wrong)) {
        Err(Error::CheckpointShape { name, expected, found }) => {
            assert_eq!(name, "a.bias");
            assert_eq!(expected, vec![5]);
            assert_eq!(found, vec![4]);
        }
        other => panic!("{other:?}"),
    }

    let mut more = small_tree();
    more.insert("b.weight", Param::weight(Tensor::zeros([1]))).unwrap();
    assert!(matches!(checkpoint::load_checkpoint(&path, Some(&more)), Err(Error::MissingTensor(n)) if n == "b.weight"));

    let mut fewer = small_tree();
    fewer.remove_prefix("a.bias");
    let loaded = checkpoint::load_checkpoint(&path, Some(&fewer)).unwrap();
    assert_eq!(loaded.extra, vec!["a.bias".to_string()]);
    assert_eq!(loaded.tree.len(), 1);
}

#[test]
fn mini_vgg_into_mini_wide_resnet_names_first_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg.ftk1");
    let vgg = BuiltModel::<f32>::build(&ModelConfig::new(Arch::MiniVgg), 1).unwrap();
    checkpoint::save_checkpoint(&vgg.params, &Meta::new(), &path).unwrap();
    let wrn = BuiltModel::<f32>::build(&ModelConfig::new(Arch::MiniWideResnet), 1).unwrap();
    let err = checkpoint::load_checkpoint(&path, Some(&wrn.params)).unwrap_err();
    let first = wrn.params.names().next().unwrap().to_string();
    assert!(matches!(&err, Error::CheckpointShape { name, .. } if *name == first), "{err}");
    assert!(err.to_string().contains(&first));
}

#[test]
fn vgg16_backbone_file_loads_with_zero_mismatches() {
    // stands in for an exported trunk: features.* only, written by a separate tree
    let cfg = ModelConfig::new(Arch::Vgg16);
    let donor = BuiltModel::<f32>::build(&cfg, 7).unwrap();
    let mut trunk = ParamTree::new();
    for (name, p) in donor.params.iter().filter(|(n, _)| n.starts_with(BACKBONE_PREFIX)) {
        trunk.insert(name, p.clone()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg16.ftk1");
    let meta: Meta = [("arch".to_string(), "vgg16".to_string())].into();
    checkpoint::save_checkpoint(&trunk, &meta, &path).unwrap();

    let mut model = BuiltModel::<f32>::build(&cfg, 99).unwrap();
    let n = checkpoint::load_prefix(&mut model.params, &path, BACKBONE_PREFIX).unwrap();
    assert_eq!(n, 26);
    for (name, p) in trunk.iter() {
        assert!(model.params.get(name).unwrap().value.bit_eq(&p.value), "{name}");
    }
}

#[test]
fn adam_state_sibling_round_trip() {
    let mut tree = small_tree();
    let mut adam = Adam::new(AdamConfig::default());
    for (_, p) in tree.iter_mut() {
        p.grad = Some(p.value.map(|v| v * 0.1 + 0.01));
    }
    adam.step(&mut tree).unwrap();
    adam.step(&mut tree).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.adam.ftk1");
    checkpoint::save_adam(&adam, &Meta::new(), &path).unwrap();
    let header = checkpoint::read_header(&path).unwrap();
    assert!(header.tensors.iter().all(|e| e.name.starts_with("adam.")));
    let back = checkpoint::load_adam(&path).unwrap();
    assert_eq!(back.step_count(), adam.step_count());
    assert_eq!(back.config, adam.config);
    let a: Vec<_> = adam.moments().collect();
    let b: Vec<_> = back.moments().collect();
    assert_eq!(a.len(), b.len());
    for ((na, ma), (nb, mb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ma.m.bit_eq(&mb.m) && ma.v.bit_eq(&mb.v));
    }
}
