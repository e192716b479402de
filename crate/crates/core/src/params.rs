//! Named parameter storage shared by all modules.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Trainable tensors addressed by [`ParamId`] and by dotted name.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Arc<Array<T>>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Array<T>> {
        self.values[id.0].clone()
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    /// Replaces a value by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Array<T>) -> Result<()> {
        let id = self
            .by_name(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if self.get(id).shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.get(id).shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Gaussian init with the given standard deviation.
pub fn normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Array<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Array::new(shape.to_vec(), data).expect("shape has no zero dimension")
}
