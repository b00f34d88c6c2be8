//! Named parameter storage.
//!
//! Parameters live as plain [`NdArray`]s between steps. For a forward pass
//! they are bound either onto a tape (tracked leaves, for training) or as
//! constants (for evaluation).

use std::collections::HashMap;
use std::sync::Arc;

use ebwm_autodiff::{NdArray, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<NdArray>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`. New names keep insertion order.
    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&NdArray> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[NdArray] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(NdArray::numel).sum()
    }

    pub fn set_values(&mut self, values: Vec<NdArray>) {
        assert_eq!(values.len(), self.values.len());
        self.values = values;
    }

    /// Binds every parameter as a constant (no tape).
    pub fn constants(&self) -> Bound {
        self.bind(None, |_| false)
    }

    /// Binds parameters for which `track` returns true as leaves on `tape`;
    /// the rest become constants.
    pub fn bind(&self, tape: Option<&Tape>, track: impl Fn(&str) -> bool) -> Bound {
        let tensors = self
            .iter()
            .map(|(name, v)| match tape {
                Some(t) if track(name) => t.leaf(v.clone()),
                _ => Tensor::constant(v.clone()),
            })
            .collect();
        Bound {
            names: Arc::new(self.names.clone()),
            index: Arc::new(self.index.clone()),
            tensors,
        }
    }
}

/// Parameters bound for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Arc<Vec<String>>,
    index: Arc<HashMap<String, usize>>,
    tensors: Vec<Tensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replaces one bound tensor, e.g. to substitute a perturbed value.
    pub fn replace(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.into()))?;
        self.tensors[i] = t;
        Ok(())
    }
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> NdArray {
    NdArray::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}
