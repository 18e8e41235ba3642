use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::Mat;
use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Named parameter tensors. Values are kept representable in `f32` so that
/// checkpoints round-trip exactly.
#[derive(Debug)]
pub struct Params {
    uid: u64,
    names: IndexMap<String, usize>,
    values: Vec<Mat>,
    trainable: bool,
}

impl Clone for Params {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            trainable: self.trainable,
        }
    }
}

impl PartialEq for Params {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

pub fn round_f32(m: &mut Mat) {
    m.mapv_inplace(|v| v as f32 as f64);
}

impl Params {
    pub fn new() -> Self {
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: IndexMap::new(),
            values: Vec::new(),
            trainable: true,
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    pub fn insert(&mut self, name: impl Into<String>, mut value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate parameter name {name}");
        round_f32(&mut value);
        let id = self.values.len();
        self.names.insert(name, id);
        self.values.push(value);
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Array2::zeros((rows, cols)))
    }

    pub fn filled(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.insert(name, Array2::from_elem((rows, cols), v))
    }

    pub fn normal<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.insert(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.names.get_index(id.0).map(|(n, _)| n.as_str()).expect("valid id")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(|(n, &i)| (n.as_str(), &self.values[i]))
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Replaces values from a named list; names and shapes must match
    /// exactly.
    pub fn load_named(&mut self, named: Vec<(String, Mat)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.values.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor '{name}' in checkpoint")))?;
            if self.values[id.0].dim() != value.dim() {
                return Err(Error::Shape(format!(
                    "tensor '{name}': checkpoint {:?} vs model {:?}",
                    value.dim(),
                    self.values[id.0].dim()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }
}
