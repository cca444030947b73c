//! Row-major f64 tensors and the named parameter store.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix (first dim).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Row length when viewed as a matrix (product of trailing dims).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Check every value is finite; names the tensor in the error.
    pub fn check_finite(&self, name: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical {
                    param: name.to_string(),
                    detail: format!("non-finite value {v} at flat index {i}"),
                });
            }
        }
        Ok(())
    }
}

/// A named parameter with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub prunable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, prunable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Param { name: name.into(), value, grad, prunable }
    }
}

/// Ordered collection of parameters. Iteration order is fixed at
/// construction and is the order used for serialization, pruning
/// tie-breaks, and layout hashing.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Param) -> Result<()> {
        if self.index.contains_key(&param.name) {
            return Err(Error::config(format!("duplicate param name `{}`", param.name)));
        }
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.get(name).unwrap_or_else(|| panic!("no param `{name}`")).value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn prunable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.prunable)
    }

    /// Total element count of prunable params (the `d` of sparsity accounting).
    pub fn prunable_len(&self) -> usize {
        self.prunable().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Accumulate gradient into a named param.
    pub fn add_grad(&mut self, name: &str, grad: &[f64]) {
        let p = self.get_mut(name).unwrap_or_else(|| panic!("no param `{name}`"));
        debug_assert_eq!(p.grad.len(), grad.len());
        for (g, d) in p.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    /// Digest binding masks to this parameter layout: names, shapes, and
    /// prunable flags in iteration order.
    pub fn layout_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.shape().len() as u64).to_le_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update([p.prunable as u8]);
        }
        h.finalize().into()
    }

    /// Digest of all parameter values, for reproducibility checks.
    pub fn value_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// In-place elementwise ops used by the optimizer and pruning.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert(Param::new("w", Tensor::zeros(vec![2]), true)).unwrap();
        assert!(s.insert(Param::new("w", Tensor::zeros(vec![2]), true)).is_err());
    }

    #[test]
    fn layout_hash_tracks_structure_not_values() {
        let mut a = ParamStore::new();
        a.insert(Param::new("w", Tensor::filled(vec![2], 1.0), true)).unwrap();
        let mut b = ParamStore::new();
        b.insert(Param::new("w", Tensor::filled(vec![2], 9.0), true)).unwrap();
        assert_eq!(a.layout_hash(), b.layout_hash());
        assert_ne!(a.value_hash(), b.value_hash());

        let mut c = ParamStore::new();
        c.insert(Param::new("w", Tensor::filled(vec![2], 1.0), false)).unwrap();
        assert_ne!(a.layout_hash(), c.layout_hash());
    }

    #[test]
    fn prunable_len_counts_only_prunable() {
        let mut s = ParamStore::new();
        s.insert(Param::new("w", Tensor::zeros(vec![2, 3]), true)).unwrap();
        s.insert(Param::new("ln", Tensor::zeros(vec![4]), false)).unwrap();
        assert_eq!(s.prunable_len(), 6);
    }
}
