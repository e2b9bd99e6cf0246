use std::collections::{BTreeMap, BTreeSet};

use crate::autodiff::Tensor;

/// Named parameter tensors of one model instance.
///
/// Names are hierarchical and dot separated. Transformer blocks live under
/// `blocks.<i>.` with `i` counted in execution order from the input side;
/// everything else (patch stem, class token, positional table, head) is
/// shared by every sub-network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

pub fn block_prefix(index: usize) -> String {
    format!("blocks.{index}.")
}

/// Block index encoded in a parameter name, if the name belongs to a block.
pub fn block_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("blocks.")?;
    rest.split('.').next()?.parse().ok()
}

/// Moves a block parameter name to another block index.
pub fn rename_block(name: &str, index: usize) -> Option<String> {
    let rest = name.strip_prefix("blocks.")?;
    let (_, tail) = rest.split_once('.')?;
    Some(format!("blocks.{index}.{tail}"))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn name_set(&self) -> BTreeSet<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn clear_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }

    /// Number of transformer blocks (highest block index + 1).
    pub fn depth(&self) -> usize {
        self.names()
            .filter_map(block_index)
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Parameters of block `index`, keyed by the name suffix after the block prefix.
    pub fn block(&self, index: usize) -> Vec<(&str, &Tensor)> {
        let prefix = block_prefix(index);
        self.tensors
            .range(prefix.clone()..)
            .take_while(|(k, _)| k.starts_with(&prefix))
            .map(|(k, v)| (&k[prefix.len()..], v))
            .collect()
    }

    /// True when both stores hold the same names with the same shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    /// Largest element-wise difference over shared names; `None` if layouts differ.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Option<f32> {
        if !self.same_layout(other) {
            return None;
        }
        Some(
            self.tensors
                .values()
                .zip(other.tensors.values())
                .map(|(a, b)| a.max_abs_diff(b))
                .fold(0.0, f32::max),
        )
    }

    /// Copy with every gradient buffer dropped.
    pub fn detached(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.detached()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_name_helpers() {
        assert_eq!(block_index("blocks.12.attn.qkv.w"), Some(12));
        assert_eq!(block_index("head.fc.w"), None);
        assert_eq!(
            rename_block("blocks.3.mlp.fc1.b", 7).as_deref(),
            Some("blocks.7.mlp.fc1.b")
        );
    }

    #[test]
    fn block_listing_does_not_leak_neighbours() {
        let mut s = ParamStore::new();
        s.insert("blocks.1.a", Tensor::zeros(&[1]));
        s.insert("blocks.10.a", Tensor::zeros(&[1]));
        s.insert("blocks.1.b", Tensor::zeros(&[1]));
        assert_eq!(s.block(1).len(), 2);
        assert_eq!(s.depth(), 11);
    }
}
