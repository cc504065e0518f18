//! Tape-based reverse-mode autodiff over dense row-major arrays.
//!
//! `Array` is a plain value (shape + flat data) safe to share read-only.
//! `Graph` is an append-only tape of operations; `Tensor` handles index
//! into it. A training step builds one graph, runs `backward` once, reads
//! gradients, and drops the graph wholesale.

mod check;
mod graph;
#[cfg(test)]
mod tests;

pub use check::{central_diff, gradient_check, GradCheckReport, Sample};
pub use graph::{Graph, Tensor};

use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<Real>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Array {
        Array { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], v: Real) -> Array {
        Array { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: Real) -> Array {
        Array { shape: vec![], data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Array> {
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Array { shape: shape.to_vec(), data })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element access for tests and small-scale code; hot paths index flat data.
    pub fn at(&self, idx: &[usize]) -> Real {
        debug_assert_eq!(idx.len(), self.shape.len());
        self.data[flat_index(&self.shape, idx)]
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    let mut flat = 0;
    for (d, &i) in idx.iter().enumerate() {
        debug_assert!(i < shape[d]);
        flat = flat * shape[d] + i;
    }
    flat
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}
