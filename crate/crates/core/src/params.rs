//! Named parameter trees: the unit of freezing, checkpointing and optimization.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable weight; participates in gradients when trainable.
    Weight,
    /// Non-learnable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    trainable: bool,
    kind: ParamKind,
}

impl<T: Element> Param<T> {
    pub fn weight(value: Tensor<T>) -> Self {
        Self {
            value,
            grad: None,
            trainable: true,
            kind: ParamKind::Weight,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Self {
            value,
            grad: None,
            trainable: false,
            kind: ParamKind::Buffer,
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn is_buffer(&self) -> bool {
        self.kind == ParamKind::Buffer
    }
}

/// Deep copy of every tensor in a tree, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T: Element> {
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Snapshot<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Ordered (definition-order) map from dotted names to parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamTree<T: Element> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Element> ParamTree<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid("param tree", format!("duplicate name {name}")));
        }
        self.params.insert(name, param);
        Ok(())
    }

    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let before = self.params.len();
        self.params.retain(|k, _| !k.starts_with(prefix));
        before - self.params.len()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub(crate) fn index_of(&self, name: &str) -> Option<usize> {
        self.params.get_index_of(name)
    }

    pub(crate) fn by_index(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub(crate) fn by_index_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Sets `trainable` on every weight whose name starts with `prefix` and
    /// returns how many matched. Buffers are never trainable and are skipped.
    pub fn set_trainable(&mut self, prefix: &str, flag: bool) -> usize {
        let mut count = 0;
        for (name, p) in self.params.iter_mut() {
            if p.kind == ParamKind::Weight && name.starts_with(prefix) {
                p.trainable = flag;
                if !flag {
                    p.grad = None;
                }
                count += 1;
            }
        }
        count
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n)
            .collect()
    }

    /// Number of learnable scalars (weights only, buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn snapshot(&self) -> Snapshot<T> {
        Snapshot {
            tensors: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Overwrites every tensor with the snapshot's copy. Names and shapes must agree.
    pub fn restore(&mut self, snap: &Snapshot<T>) -> Result<()> {
        for (name, p) in self.params.iter() {
            match snap.tensors.get(name) {
                None => return Err(Error::MissingTensor(name.clone())),
                Some(t) if t.shape() != p.value.shape() => {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        expected: p.value.shape().to_vec(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        for (name, p) in self.params.iter_mut() {
            p.value.clone_from(&snap.tensors[name]);
        }
        Ok(())
    }

    /// Checksums of every tensor whose name starts with `prefix`.
    pub fn checksums(&self, prefix: &str) -> Vec<(String, u64)> {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, p)| (n.to_string(), p.value.checksum()))
            .collect()
    }
}
