//! Per-class feature centroids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A partial map from class index to a `dim`-dimensional prototype.
///
/// Iteration is always in ascending class order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    dim: usize,
    protos: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            protos: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, class: usize, proto: Vec<f64>) -> Result<()> {
        if proto.len() != self.dim {
            return Err(Error::dim("prototype", self.dim, proto.len()));
        }
        self.protos.insert(class, proto);
        Ok(())
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.protos.get(&class).map(Vec::as_slice)
    }

    pub fn contains(&self, class: usize) -> bool {
        self.protos.contains_key(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.protos.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.protos.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.protos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.protos.is_empty()
    }

    /// Scalars carried by this set when transmitted.
    pub fn param_count(&self) -> usize {
        self.protos.len() * self.dim
    }

    /// Copies classes from `older` that are missing here.
    pub fn fill_missing_from(&mut self, older: &PrototypeSet) {
        for (k, p) in older.iter() {
            self.protos.entry(k).or_insert_with(|| p.to_vec());
        }
    }
}
