//! Flat real-valued tensors with a declared shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A latent image, a group hidden state, or a velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    data: Vec<f64>,
    shape: Vec<usize>,
}

impl LatentState {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::config(format!("invalid shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                group: None,
                step: None,
            });
        }
        Ok(Self { data, shape })
    }

    /// One-dimensional state.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(data, vec![n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            data: vec![0.0; n],
            shape: shape.to_vec(),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, different shape.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        Self::new(self.data.clone(), shape.to_vec())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::config(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// Euclidean distance `‖self - other‖`.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(self.zip_map(other, |a, b| a + c * b))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }

    fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            shape: self.shape.clone(),
        }
    }

    pub(crate) fn from_parts_unchecked(data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { data, shape }
    }
}
