//! Shape-checked finite tensors and named parameter collections.

use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major array of finite `f64` values with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl TensorGrid {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::config(format!("shape {shape:?} has a zero extent")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite value at flat index {i}")));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
        }
    }

    /// One-dimensional tensor.
    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn from_array2(a: &Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        Self::new(vec![r, c], a.iter().copied().collect())
    }

    pub fn from_array1(a: &Array1<f64>) -> Result<Self> {
        Self::vector(a.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Mutable access for in-place updates. Callers must keep every value finite.
    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.values.clone())
    }

    /// View as a matrix; one-dimensional tensors become a single row.
    pub fn as_matrix(&self) -> Result<ArrayView2<'_, f64>> {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => return Err(Error::config(format!("expected rank 1 or 2, got shape {s:?}"))),
        };
        ArrayView2::from_shape((r, c), &self.values).map_err(|e| Error::config(e.to_string()))
    }

    pub(crate) fn as_matrix_mut(&mut self) -> Result<ArrayViewMut2<'_, f64>> {
        let (r, c) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => return Err(Error::config(format!("expected rank 1 or 2, got shape {s:?}"))),
        };
        ArrayViewMut2::from_shape((r, c), &mut self.values).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_array1(&self) -> Array1<f64> {
        Array1::from(self.values.clone())
    }

    pub fn ensure_same_shape(&self, other: &TensorGrid, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::config(format!(
                "{what}: shape {:?} does not match {:?}",
                other.shape, self.shape
            )));
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn l2_distance(&self, other: &TensorGrid) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Every value rounded to the nearest `f32`.
    pub fn round_to_f32(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

/// Check a whole matrix for non-finite entries.
pub fn ensure_finite(a: &Array2<f64>, what: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite value in {}", what())))
    }
}

/// Ordered, uniquely named collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, TensorGrid)>,
    step_count: u64,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, TensorGrid)>) -> Result<Self> {
        for (i, (name, _)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::config(format!("duplicate parameter name `{name}`")));
            }
        }
        Ok(Self {
            entries,
            step_count: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn bump_step(&mut self) {
        self.step_count += 1;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorGrid)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&TensorGrid> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &TensorGrid {
        &self.entries[index].1
    }

    pub(crate) fn tensor_mut(&mut self, index: usize) -> &mut TensorGrid {
        &mut self.entries[index].1
    }

    /// Replace one tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: TensorGrid) -> Result<()> {
        let slot = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        slot.1.ensure_same_shape(&value, name)?;
        slot.1 = value;
        Ok(())
    }

    /// Zero tensors with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), TensorGrid::zeros(t.shape())))
                .collect(),
            step_count: 0,
        }
    }

    pub fn ensure_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::config(format!("parameter name mismatch: `{na}` vs `{nb}`")));
            }
            ta.ensure_same_shape(tb, na)?;
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn round_to_f32(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.round_to_f32()))
                .collect(),
            step_count: self.step_count,
        }
    }

    pub fn into_entries(self) -> Vec<(String, TensorGrid)> {
        self.entries
    }
}
