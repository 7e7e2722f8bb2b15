use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// An ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Inserts every tensor as a leaf: tracked when `trainable`, constant otherwise.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Verifies names and shapes against a layout.
    pub fn check_layout(&self, layout: &[(String, Vec<usize>)]) -> Result<()> {
        if layout.len() != self.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.len()
            )));
        }
        for ((name, shape), (have_name, t)) in layout.iter().zip(self.iter()) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {have_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}
