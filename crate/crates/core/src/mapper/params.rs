//! Ordered, named parameter arrays.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndgrad::{Gradients, Tape, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.values[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
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

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Same names, every value registered as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Self {
        Self {
            names: self.names.clone(),
            values: self.values.iter().map(|v| tape.param(v)).collect(),
            index: self.index.clone(),
        }
    }

    /// Same names, every value detached.
    pub fn detach(&self) -> Self {
        self.map(|_, v| v.detach())
    }

    pub fn map(&self, mut f: impl FnMut(&str, &Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            names: self.names.clone(),
            values: self.iter().map(|(n, v)| f(n, v)).collect(),
            index: self.index.clone(),
        }
    }

    /// Gradients for every parameter of a bound store, zeros where unused.
    pub fn grads(&self, g: &Gradients<T>) -> Self {
        self.map(|_, v| g.get_or_zeros(v).detach())
    }

    /// Replaces values in place, checking every shape.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::Config(format!(
                "expected {} parameter arrays, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for ((name, old), new) in self.names.iter().zip(&self.values).zip(&values) {
            if old.shape() != new.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: old.shape().to_vec(),
                    got: new.shape().to_vec(),
                });
            }
        }
        self.values = values;
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.iter() {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
