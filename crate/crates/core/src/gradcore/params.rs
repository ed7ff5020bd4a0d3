use std::ops::{Index, IndexMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::matrix::Matrix;

/// Ordered, named collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Weight matrix drawn uniformly from ±√(6/(fan_in+fan_out)).
    pub fn push_xavier<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> usize {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-limit..=limit));
        self.push(name, w)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Matrix> {
        self.values.iter()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Every parameter value flattened in order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }
}

impl Index<usize> for ParamSet {
    type Output = Matrix;

    fn index(&self, i: usize) -> &Matrix {
        &self.values[i]
    }
}

impl IndexMut<usize> for ParamSet {
    fn index_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.values[i]
    }
}
