//! Named tensor collections with deterministic (lexicographic) traversal.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Leaves keyed by `/`-separated path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    leaves: BTreeMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Option<Tensor> {
        self.leaves.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.leaves
            .get(name)
            .ok_or_else(|| Error::StructureMismatch(format!("missing leaf `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.leaves
            .get_mut(name)
            .ok_or_else(|| Error::StructureMismatch(format!("missing leaf `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.leaves.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.leaves.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.leaves.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.leaves.keys()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.leaves.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> Self {
        Self {
            leaves: self.leaves.iter().map(|(k, v)| (k.clone(), f(v))).collect(),
        }
    }

    /// Errors unless both trees have the same names and shapes.
    pub fn check_same_structure(&self, other: &ParamTree) -> Result<()> {
        if self.leaves.len() != other.leaves.len() {
            return Err(Error::StructureMismatch(format!(
                "{} leaves vs {}",
                self.leaves.len(),
                other.leaves.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.leaves.iter().zip(&other.leaves) {
            if ka != kb {
                return Err(Error::StructureMismatch(format!("leaf `{ka}` vs `{kb}`")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::StructureMismatch(format!(
                    "leaf `{ka}`: shape {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &ParamTree, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        self.check_same_structure(other)?;
        Ok(Self {
            leaves: self
                .leaves
                .iter()
                .zip(other.leaves.values())
                .map(|((k, a), b)| {
                    let data = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| f(*x, *y))
                        .collect();
                    (
                        k.clone(),
                        Tensor::new(a.shape().to_vec(), data).expect("same shape"),
                    )
                })
                .collect(),
        })
    }

    /// `x + delta`, leaf by leaf.
    pub fn add(&self, delta: &ParamTree) -> Result<Self> {
        self.zip_map(delta, |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|t| t.scale(k))
    }

    pub fn is_finite(&self) -> bool {
        self.leaves.values().all(Tensor::is_finite)
    }

    /// All leaves concatenated in traversal order.
    pub fn flatten(&self) -> Vec<f64> {
        self.leaves
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian payloads.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.leaves {
            h.update(k.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_vars<'t>(&self, tape: &'t Tape, trainable: bool) -> VarTree<'t> {
        VarTree {
            leaves: self
                .leaves
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        tape.param(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }

    /// Leaves whose name starts with `prefix`, with the prefix removed.
    pub fn subtree(&self, prefix: &str) -> Self {
        Self {
            leaves: self
                .leaves
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Inserts every leaf of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamTree) {
        for (k, v) in &other.leaves {
            self.leaves.insert(format!("{prefix}{k}"), v.clone());
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamTree {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            leaves: iter.into_iter().collect(),
        }
    }
}

/// Tape handles for a [`ParamTree`].
#[derive(Clone, Debug, Default)]
pub struct VarTree<'t> {
    leaves: BTreeMap<String, Var<'t>>,
}

impl<'t> VarTree<'t> {
    pub fn new() -> Self {
        Self {
            leaves: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| Error::StructureMismatch(format!("missing leaf `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var<'t>) {
        self.leaves.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.leaves.iter()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn values(&self) -> ParamTree {
        self.leaves
            .iter()
            .map(|(k, v)| (k.clone(), v.value().as_ref().clone()))
            .collect()
    }

    /// Merges `other` into `self`; used to combine trainable and fixed leaves.
    pub fn extend(&mut self, other: VarTree<'t>) {
        self.leaves.extend(other.leaves);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree() -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("b", Tensor::vector(vec![1.0, 2.0]));
        t.insert("a/w", Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        t
    }

    #[test]
    fn traversal_is_lexicographic() {
        let names: Vec<_> = tree().names().cloned().collect();
        assert_eq!(names, ["a/w", "b"]);
        assert_eq!(tree().flatten(), [3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn add_then_subtract_restores() {
        let x = tree();
        let d = x.map(|t| t.map(|v| v * 0.37 + 0.1));
        let back = x.add(&d).unwrap().add(&d.scale(-1.0)).unwrap();
        for (a, b) in back.flatten().iter().zip(x.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(x.add(&x.zeros_like()).unwrap(), x);
    }

    #[test]
    fn structure_mismatch_detected() {
        let mut other = tree();
        other.insert("b", Tensor::vector(vec![1.0]));
        assert!(tree().add(&other).is_err());
        let mut extra = tree();
        extra.insert("c", Tensor::scalar(0.0));
        assert!(tree().check_same_structure(&extra).is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let mut t = tree();
        let h = t.hash();
        assert_eq!(h, tree().hash());
        t.get_mut("b").unwrap().data_mut()[0] = 1.5;
        assert_ne!(h, t.hash());
    }
}
