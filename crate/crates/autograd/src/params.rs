use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("parameter `{0}` already exists")]
    Duplicate(String),
    #[error("parameter `{0}` not found")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("flat buffer holds {found} values, layout needs {expected}")]
    Length { expected: usize, found: usize },
}

/// Shape record for one parameter in a flattened layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub name: String,
    pub shape: (usize, usize),
}

/// Named trainable matrices, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> Result<(), ParamError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<f64>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn layout(&self) -> Vec<ParamLayout> {
        self.tensors
            .iter()
            .map(|(name, t)| ParamLayout { name: name.clone(), shape: t.dim() })
            .collect()
    }

    /// Row-major concatenation of every tensor in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.tensors.values() {
            out.extend(t.iter().copied());
        }
        out
    }

    pub fn from_flat(layout: &[ParamLayout], data: &[f64]) -> Result<Self, ParamError> {
        let expected: usize = layout.iter().map(|l| l.shape.0 * l.shape.1).sum();
        if expected != data.len() {
            return Err(ParamError::Length { expected, found: data.len() });
        }
        let mut store = Self::new();
        let mut offset = 0;
        for l in layout {
            let n = l.shape.0 * l.shape.1;
            let t = Array2::from_shape_vec(l.shape, data[offset..offset + n].to_vec())
                .expect("layout length checked above");
            store.insert(l.name.clone(), t)?;
            offset += n;
        }
        Ok(store)
    }

    /// Copies every tensor whose name starts with `prefix` from `other`.
    /// Returns how many tensors were copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, ParamError> {
        let mut copied = 0;
        for (name, t) in other.tensors.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let dst = self.tensors.get_mut(name).ok_or_else(|| ParamError::Missing(name.clone()))?;
            if dst.dim() != t.dim() {
                return Err(ParamError::Shape { name: name.clone(), expected: dst.dim(), found: t.dim() });
            }
            dst.assign(t);
            copied += 1;
        }
        Ok(copied)
    }
}
